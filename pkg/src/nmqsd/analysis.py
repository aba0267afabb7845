"""Signal-frequency histogram and two-peak lineshape analysis.

The histogram chi(P) is the time-and-ensemble occupancy density of the
bright-manifold signal P in [0, 1], normalized to unit integral.  It is
decomposed into a low-signal peak, a high-signal peak and an
erf-plateau background by damped Gauss-Newton fitting, and the
bright/dark peak-area ratio is extracted by adaptive quadrature of the
two fitted peaks (background excluded).

Two lineshape variants are fitted with a shared parameter vector
(h1..h4, w1..w8, P1, P2); they differ in the rational forms of the two
peaks.  The background carries its own amplitude h4 so that all three
components have independent scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .leastsq import damped_gauss_newton

__all__ = [
    "AreaReport",
    "Histogram",
    "LineshapeFit",
    "LineshapeFitError",
    "PARAM_NAMES",
    "VARIANTS",
    "adaptive_simpson",
    "eval_lineshape",
    "fit_lineshape",
    "histogram",
    "lineshape_components",
    "peak_area_ratio",
]

VARIANTS = ("nonmarkov", "markov")
PARAM_NAMES = ("h1", "h2", "h3", "h4", "w1", "w2", "w3", "w4",
               "w5", "w6", "w7", "w8", "P1", "P2")
_MIN_WIDTH = 1e-4


@dataclass
class Histogram:
    edges: np.ndarray      # (n_bins + 1,)
    density: np.ndarray    # (n_bins,) normalized to unit integral
    counts: np.ndarray     # (n_bins,) raw sample counts
    t_window: tuple[float, float]
    n_samples: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])


def histogram(p_table: np.ndarray, t: np.ndarray, delta_p: float = 0.01,
              t_window: tuple[float, float] | None = None) -> Histogram:
    """Occupancy histogram of signal samples within a time window.

    The default window drops the first 10% of the run as transient.
    Samples are clipped into [0, 1] (the integrator can overshoot by
    ~1e-6 at most, which the clip absorbs).
    """
    if not 0.0 < delta_p <= 0.1:
        raise ValueError("delta_p must be in (0, 0.1]")
    p_table = np.atleast_2d(np.asarray(p_table, dtype=float))
    t = np.asarray(t, dtype=float)
    if t_window is None:
        t_window = (0.1 * t[-1], t[-1])
    lo, hi = t_window
    mask = (t >= lo) & (t <= hi)
    if not np.any(mask):
        raise ValueError(f"time window {t_window} selects no samples")
    samples = p_table[:, mask].ravel()
    samples = samples[~np.isnan(samples)]
    if samples.size == 0:
        raise ValueError("no surviving samples in window")
    n_bins = int(round(1.0 / delta_p))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(samples, 0.0, 1.0), bins=edges)
    width = edges[1] - edges[0]
    density = counts / (counts.sum() * width)
    return Histogram(edges=edges, density=density, counts=counts,
                     t_window=(float(lo), float(hi)), n_samples=int(samples.size))


# ---------------------------------------------------------------------------
# lineshapes
# ---------------------------------------------------------------------------

def _unpack(params) -> dict:
    if isinstance(params, dict):
        return params
    arr = np.asarray(params, dtype=float)
    if arr.size != len(PARAM_NAMES):
        raise ValueError(f"need {len(PARAM_NAMES)} parameters, got {arr.size}")
    return dict(zip(PARAM_NAMES, arr))


def lineshape_components(variant: str, params, p):
    """(low peak, high peak, background) evaluated at p."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    q = _unpack(params)
    p = np.asarray(p, dtype=float)
    one_m = 1.0 - p
    if variant == "nonmarkov":
        chi1 = q["h1"] * np.sqrt(np.maximum(p, 0.0)) / ((p / q["w1"]) ** 2 + 1.0)
        chi2 = (q["h2"] * p / ((one_m / q["w2"]) ** 3 + (one_m / q["w3"]) ** 2
                               + one_m / q["w4"] + 1.0)
                + q["h3"] * p / ((one_m / q["w5"]) ** 2 + one_m / q["w6"] + 1.0))
    else:
        chi1 = q["h1"] * p / ((p / q["w1"]) ** 2 + p / q["w2"] + 1.0)
        chi2 = (q["h2"] * p / ((one_m / q["w3"]) ** 2 + one_m / q["w4"] + 1.0)
                + q["h3"] * p / ((one_m / q["w5"]) ** 2 + one_m / q["w6"] + 1.0))
    bg = q["h4"] * (erf((p - q["P1"]) / q["w7"]) - erf((p - q["P2"]) / q["w8"]))
    return chi1, chi2, bg


def eval_lineshape(variant: str, params, p):
    chi1, chi2, bg = lineshape_components(variant, params, p)
    return chi1 + chi2 + bg


@dataclass
class LineshapeFit:
    variant: str
    params: dict
    rms: float
    covariance: np.ndarray | None
    converged: bool

    def vector(self) -> np.ndarray:
        return np.array([self.params[name] for name in PARAM_NAMES])


def _project_lineshape(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    out[0:4] = np.maximum(out[0:4], 0.0)                  # amplitudes
    out[4:12] = np.clip(out[4:12], _MIN_WIDTH, 100.0)     # widths
    out[12:14] = np.clip(out[12:14], -0.5, 1.5)
    if out[12] > out[13]:                                 # P1 <= P2 keeps bg >= 0
        out[12] = out[13] = 0.5 * (out[12] + out[13])
    return out


def _fit_starts(hist: Histogram, variant: str) -> list[np.ndarray]:
    """Deterministic starts seeded from the histogram's end maxima.

    Peak positions fix the width scales and the measured apex densities
    fix the amplitudes, so each start already matches both peaks to
    within a factor of order one; the Gauss-Newton polish then resolves
    the decomposition.
    """
    c = hist.centers
    rho = hist.density
    low_mask = c < 0.4
    high_mask = c >= 0.6
    i_low = int(np.argmax(np.where(low_mask, rho, -1.0)))
    i_high = int(np.argmax(np.where(high_mask, rho, -1.0)))
    p_low = max(float(c[i_low]), hist.bin_width)
    s_high = max(1.0 - float(c[i_high]), hist.bin_width)
    rho_low = max(float(rho[i_low]), 1e-12)
    rho_high = max(float(rho[i_high]), 1e-12)
    interior = rho[(c > 0.25) & (c < 0.75)]
    h_bg = max(float(np.median(interior)) / 2.0, 1e-9) if interior.size else 1e-9

    low_width_multipliers = (1.0,) if variant == "nonmarkov" else (4.0, 25.0)
    starts = []
    for scale in (1.0, 0.5, 2.0):
        for mult in low_width_multipliers:
            x = np.empty(14)
            w1 = math.sqrt(3.0) * p_low * scale
            if variant == "nonmarkov":
                # apex of h1 sqrt(P)/((P/w1)^2+1) sits at P = w1/sqrt(3)
                x[0] = rho_low * (4.0 / 3.0) / math.sqrt(p_low)
                w_high = max(2.0 * s_high * scale, 2.0 * hist.bin_width)
                x[5] = x[6] = x[7] = w_high                       # w2..w4
            else:
                # apex of h1 P/((P/w1)^2+P/w2+1) is near w1 for w2 >> w1
                x[0] = rho_low * 3.0 / p_low
                x[5] = mult * w1                                  # w2 (low peak)
                w_high = max(2.0 * s_high * scale, 2.0 * hist.bin_width)
                x[6] = x[7] = w_high                              # w3, w4
            x[4] = w1
            # first high-peak term matched to the apex density; the
            # second starts broad and small
            denom = 0.875 + 1.0 if variant == "nonmarkov" else 0.75
            x[1] = rho_high * denom / max(1.0 - s_high, 0.5)      # h2
            x[2] = x[1] / 5.0                                     # h3
            x[8] = x[9] = 3.0 * w_high                            # w5, w6
            x[3] = h_bg                                           # h4
            x[10] = x[11] = 0.05                                  # w7, w8
            x[12] = min(3.0 * p_low, 0.3)                         # P1
            x[13] = max(1.0 - 3.0 * s_high, 0.7)                  # P2
            starts.append(_project_lineshape(x))
    return starts


class LineshapeFitError(RuntimeError):
    """Fit failure; carries the best fit found so far."""

    def __init__(self, message: str, best: LineshapeFit):
        super().__init__(message)
        self.best = best


def _component_columns(variant: str, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """(n_bins, 4) design matrix: each component at unit amplitude."""
    unit = x.copy()
    unit[0:4] = 1.0
    chi1, _, bg = lineshape_components(variant, unit, p)
    only2a = unit.copy()
    only2a[2] = 0.0
    _, chi2a, _ = lineshape_components(variant, only2a, p)
    only2b = unit.copy()
    only2b[1] = 0.0
    _, chi2b, _ = lineshape_components(variant, only2b, p)
    return np.column_stack([chi1, chi2a, chi2b, bg])


_NEGATIVE_BG_PENALTY = 10.0


def _bg_penalty(bg: np.ndarray) -> np.ndarray:
    """One-sided hinge keeping the background component non-negative.

    Without it the erf pair with unequal widths can dip below zero and
    the amplitudes compensate, producing component areas larger than
    the total histogram mass.
    """
    return _NEGATIVE_BG_PENALTY * np.minimum(bg, 0.0)


def _varpro_seed(variant, x0, centers, density, max_iter=200):
    """Variable-projection seeding.

    The four amplitudes enter linearly, so for any trial widths the
    optimal non-negative amplitudes come from a linear solve; the
    Gauss-Newton search then runs over the ten nonlinear parameters
    only, which reliably reaches the global basin on clean data.
    """
    from scipy.optimize import nnls

    def solve_amplitudes(xn):
        full = x0.copy()
        full[4:14] = xn
        full = _project_lineshape(full)
        cols = _component_columns(variant, full, centers)
        h, _ = nnls(cols, density)
        full[0:4] = h
        fit_res = cols @ h - density
        return full, np.concatenate([fit_res, _bg_penalty(cols[:, 3] * h[3])])

    def residual(xn):
        return solve_amplitudes(xn)[1]

    def project(xn):
        full = x0.copy()
        full[4:14] = xn
        return _project_lineshape(full)[4:14]

    res = damped_gauss_newton(residual, x0[4:14].copy(), project=project,
                              max_iter=max_iter)
    return solve_amplitudes(res.x)[0]


def fit_lineshape(hist: Histogram, variant: str, *, max_iter: int = 500) -> LineshapeFit:
    """Least-squares fit of the three-component lineshape to bin densities."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if hist.density.size < 50:
        raise ValueError(f"need at least 50 bins to fit, got {hist.density.size}")
    c = hist.centers
    rho = hist.density

    def residual(x):
        chi1, chi2, bg = lineshape_components(variant, x, c)
        return np.concatenate([chi1 + chi2 + bg - rho, _bg_penalty(bg)])

    best = None
    for x0 in _fit_starts(hist, variant):
        for seed in (x0, _varpro_seed(variant, x0, c, rho)):
            res = damped_gauss_newton(residual, seed, project=_project_lineshape,
                                      max_iter=max_iter)
            if best is None or res.rms < best.rms:
                best = res
    data_res = eval_lineshape(variant, best.x, c) - rho
    rms = float(np.sqrt(np.mean(data_res**2)))
    peak_height = float(rho.max())
    converged = best.converged or rms < peak_height
    covariance = None
    if best.jacobian is not None:
        jac = best.jacobian[: c.size]
        jtj = jac.T @ jac
        try:
            covariance = np.linalg.inv(jtj + 1e-12 * np.eye(14)) * rms**2
        except np.linalg.LinAlgError:
            covariance = None
    fit = LineshapeFit(variant=variant, params=dict(zip(PARAM_NAMES, best.x)),
                       rms=rms, covariance=covariance, converged=converged)
    if not converged:
        raise LineshapeFitError("lineshape fit failed to converge", fit)
    return fit


# ---------------------------------------------------------------------------
# peak areas
# ---------------------------------------------------------------------------

def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10,
                     max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with absolute error control."""
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2.0, depth + 1))

    return recurse(a, b, fa, fm, fb, whole, tol, 0)


@dataclass
class AreaReport:
    area_bright: float
    area_dark: float
    ratio: float
    background_area: float


def peak_area_ratio(fit: LineshapeFit, tol: float = 1e-10) -> AreaReport:
    """Integrate the two fitted peaks over [0, 1]; background excluded."""
    def part(idx):
        return lambda p: lineshape_components(fit.variant, fit.params, p)[idx]

    area_dark = adaptive_simpson(part(0), 0.0, 1.0, tol)
    area_bright = adaptive_simpson(part(1), 0.0, 1.0, tol)
    area_bg = adaptive_simpson(part(2), 0.0, 1.0, tol)
    if area_dark < 10.0 * np.finfo(float).eps:
        raise ValueError(f"degenerate fit: dark peak area {area_dark:.3e}")
    return AreaReport(area_bright=area_bright, area_dark=area_dark,
                      ratio=area_bright / area_dark, background_area=area_bg)
