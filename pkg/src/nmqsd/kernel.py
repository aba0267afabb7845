"""Bath memory kernels as finite sums of complex exponentials.

A kernel is ``alpha(t, s) = sum_j A_j exp(-gamma_j |t-s|) exp(-i omega_j (t-s))``
with ``A_j >= 0`` and ``gamma_j >= 0``.  Everything downstream (noise
generation, the trajectory propagator, the Markovian limit) consumes this
representation.  Kernels for discrete bosonic baths are exact special
cases with ``gamma_j = 0``.

Units: hbar = 1 throughout; amplitudes carry 1/time^2 so that coupling
constants are absorbed into the kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .leastsq import damped_gauss_newton

__all__ = [
    "KernelFitError",
    "KernelFitReport",
    "KernelTerm",
    "MemoryKernel",
    "ModeBath",
    "fit_kernel",
    "load_kernel",
    "memory_time",
    "mg24_kernel",
    "mode_kernel_thermal",
    "mode_kernel_zero_t",
    "mode_kernels_pm",
    "save_kernel",
]


@dataclass(frozen=True)
class KernelTerm:
    """One exponential term: amplitude, decay rate and rotation frequency."""

    amplitude: float
    decay: float
    frequency: float

    def __post_init__(self):
        if not (math.isfinite(self.amplitude) and math.isfinite(self.decay)
                and math.isfinite(self.frequency)):
            raise ValueError("kernel term parameters must be finite")
        if self.amplitude < 0.0:
            raise ValueError(f"kernel amplitude must be >= 0, got {self.amplitude}")
        if self.decay < 0.0:
            raise ValueError(f"kernel decay must be >= 0, got {self.decay}")


@dataclass(frozen=True)
class MemoryKernel:
    """Finite exponential-sum bath correlation function."""

    terms: tuple[KernelTerm, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def amplitudes(self) -> np.ndarray:
        return np.array([t.amplitude for t in self.terms], dtype=float)

    def decays(self) -> np.ndarray:
        return np.array([t.decay for t in self.terms], dtype=float)

    def frequencies(self) -> np.ndarray:
        return np.array([t.frequency for t in self.terms], dtype=float)

    def eval(self, t, s):
        """alpha(t, s); accepts scalars or arrays (broadcast over t-s)."""
        dt = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        a = self.amplitudes()
        g = self.decays()
        w = self.frequencies()
        out = np.einsum(
            "j,...j->...",
            a,
            np.exp(-g * np.abs(dt)[..., None] - 1j * w * dt[..., None]),
        )
        if np.ndim(t) == 0 and np.ndim(s) == 0:
            return complex(out)
        return out

    def __call__(self, t, s):
        return self.eval(t, s)


def memory_time(kernel: MemoryKernel) -> float:
    """Integral of Re alpha(t, 0) over t >= 0, in closed form.

    Each term contributes A*gamma/(gamma^2 + omega^2).  A term with
    gamma = 0 and omega != 0 integrates to zero (pure oscillation); a
    term with gamma = omega = 0 and A > 0 makes the integral diverge.
    """
    tau = 0.0
    for term in kernel.terms:
        if term.decay == 0.0:
            if term.frequency == 0.0 and term.amplitude > 0.0:
                raise ValueError("memory time diverges: constant term with gamma=0, omega=0")
            continue
        tau += term.amplitude * term.decay / (term.decay**2 + term.frequency**2)
    return tau


@dataclass(frozen=True)
class ModeBath:
    """Discrete bosonic bath: (coupling, frequency) per mode, at temperature T.

    Couplings and frequencies are in hbar = 1 units; ``temperature`` is
    k_B T in the same energy unit.
    """

    modes: tuple[tuple[float, float], ...]
    temperature: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple((float(g), float(w)) for g, w in self.modes))
        if not all(math.isfinite(g) and math.isfinite(w) for g, w in self.modes):
            raise ValueError("bath mode parameters must be finite")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.temperature > 0.0 and any(w <= 0.0 for _, w in self.modes):
            raise ValueError("thermal weights require all mode frequencies > 0")

    def weights(self) -> np.ndarray:
        """Boltzmann weights exp(-omega/T) per mode (zeros at T=0)."""
        if self.temperature == 0.0:
            return np.zeros(len(self.modes))
        return np.exp(-np.array([w for _, w in self.modes]) / self.temperature)


def mode_kernel_zero_t(bath: ModeBath) -> MemoryKernel:
    """Vacuum-bath kernel sum_j g_j^2 exp(-i omega_j (t-s)): gamma = 0 terms."""
    if bath.temperature != 0.0:
        raise ValueError("zero-temperature kernel requested for a bath with T > 0")
    return MemoryKernel(tuple(KernelTerm(g * g, 0.0, w) for g, w in bath.modes))


def mode_kernel_thermal(bath: ModeBath) -> MemoryKernel:
    """Thermal Hermitian-coupling kernel.

    sum_j g_j^2 [coth(omega_j / 2T) cos(omega_j dt) - i sin(omega_j dt)],
    expressed exactly as exponential terms via coth(x/2T) = (1+w)/(1-w)
    with w = exp(-omega/T): one co-rotating term of weight 1/(1-w) and
    one counter-rotating term of weight w/(1-w).  Reduces to the vacuum
    kernel at T = 0.
    """
    if bath.temperature == 0.0:
        return mode_kernel_zero_t(bath)
    weights = bath.weights()
    terms = []
    for (g, w_freq), w in zip(bath.modes, weights):
        if w >= 1.0:
            raise ValueError("thermal weight reached 1 (mode frequency must be > 0)")
        terms.append(KernelTerm(g * g / (1.0 - w), 0.0, w_freq))
        if w > 0.0:
            terms.append(KernelTerm(g * g * w / (1.0 - w), 0.0, -w_freq))
    return MemoryKernel(tuple(terms))


def mode_kernels_pm(bath: ModeBath) -> tuple[MemoryKernel, MemoryKernel]:
    """Emission/absorption kernel pair for non-Hermitian coupling.

    minus: sum_j g_j^2 / (1-w_j) exp(-i omega_j dt)
    plus:  sum_j g_j^2 w_j / (1-w_j) exp(+i omega_j dt)

    The plus kernel vanishes identically at T = 0.
    """
    weights = bath.weights()
    minus = []
    plus = []
    for (g, w_freq), w in zip(bath.modes, weights):
        if w >= 1.0:
            raise ValueError("thermal weight reached 1 (mode frequency must be > 0)")
        minus.append(KernelTerm(g * g / (1.0 - w), 0.0, w_freq))
        plus.append(KernelTerm(g * g * w / (1.0 - w), 0.0, -w_freq))
    return MemoryKernel(tuple(minus)), MemoryKernel(tuple(plus))


# ---------------------------------------------------------------------------
# nonlinear fit of sampled correlation data
# ---------------------------------------------------------------------------

@dataclass
class KernelFitReport:
    rms: float
    n_iter: int
    converged: bool
    n_starts: int


class KernelFitError(RuntimeError):
    """Fit did not converge; carries the best kernel found so far."""

    def __init__(self, message: str, best: MemoryKernel, rms: float):
        super().__init__(message)
        self.best = best
        self.rms = rms


def _kernel_model(params: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = params.size // 3
    a = params[0::3][:, None]
    g = params[1::3][:, None]
    w = params[2::3][:, None]
    return np.sum(a * np.exp(-(g + 1j * w) * t[None, :]), axis=0)


def _kernel_residual(params: np.ndarray, t: np.ndarray, values: np.ndarray) -> np.ndarray:
    diff = _kernel_model(params, t) - values
    return np.concatenate([diff.real, diff.imag])


def _kernel_jacobian(params: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of the stacked (Re, Im) residual."""
    m = params.size // 3
    n = t.size
    jac = np.empty((2 * n, 3 * m))
    for j in range(m):
        a, g, w = params[3 * j], params[3 * j + 1], params[3 * j + 2]
        e = np.exp(-(g + 1j * w) * t)
        d_a = e
        d_g = -a * t * e
        d_w = -1j * a * t * e
        for col, d in ((3 * j, d_a), (3 * j + 1, d_g), (3 * j + 2, d_w)):
            jac[:n, col] = d.real
            jac[n:, col] = d.imag
    return jac


def _project_kernel_params(params: np.ndarray) -> np.ndarray:
    out = params.copy()
    out[0::3] = np.maximum(out[0::3], 0.0)
    out[1::3] = np.maximum(out[1::3], 0.0)
    return out


def _fit_starts(t: np.ndarray, values: np.ndarray, m: int) -> list[np.ndarray]:
    """Deterministic multi-start initial guesses.

    Decay rates are spread log-uniformly over scales resolvable by the
    sample span; frequencies come from the discrete Fourier transform of
    the (uniformly resampled) data.
    """
    span = float(t[-1] - t[0])
    if span <= 0.0:
        raise ValueError("samples must span a positive time interval")
    n_uniform = max(64, 4 * t.size)
    tu = np.linspace(t[0], t[-1], n_uniform)
    vu = np.interp(tu, t, values.real) + 1j * np.interp(tu, t, values.imag)
    spectrum = np.fft.fft(vu)
    freqs = 2.0 * np.pi * np.fft.fftfreq(n_uniform, d=tu[1] - tu[0])
    order = np.argsort(np.abs(spectrum))[::-1]
    peak_freqs = [-freqs[k] for k in order[: max(m, 1)]]
    while len(peak_freqs) < m:
        peak_freqs.append(peak_freqs[-1])
    a0 = max(float(np.abs(values).max()) / m, 1e-12)
    starts = []
    for s in range(m):
        scale = 10.0 ** (s - (m - 1) / 2.0)
        g_grid = np.geomspace(0.5 / span * scale, 50.0 / span * scale, m)
        params = np.empty(3 * m)
        params[0::3] = a0
        params[1::3] = g_grid
        params[2::3] = peak_freqs
        starts.append(params)
    return starts


def fit_kernel(times, values, m: int, init: MemoryKernel | list[KernelTerm] | None = None,
               *, max_iter: int = 400, rms_tol: float = 1e-9) -> tuple[MemoryKernel, KernelFitReport]:
    """Fit an m-term exponential kernel to samples of alpha(t, 0).

    Damped Gauss-Newton with analytic Jacobians; when no initial guess
    is supplied, m deterministic starts are tried and the best result
    kept.  Returns terms sorted by descending amplitude.  Raises
    :class:`KernelFitError` (carrying the best kernel and its residual)
    when no start converges.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=complex)
    if m < 1:
        raise ValueError("term count m must be >= 1")
    if t.size != v.size:
        raise ValueError("times and values must have equal length")
    if t.size < 4 * m:
        raise ValueError(f"need at least {4 * m} samples for an m={m} fit, got {t.size}")
    order = np.argsort(t)
    t, v = t[order], v[order]

    if init is not None:
        init_terms = init.terms if isinstance(init, MemoryKernel) else tuple(init)
        if len(init_terms) != m:
            raise ValueError("init must supply exactly m terms")
        p0 = np.empty(3 * m)
        for j, term in enumerate(init_terms):
            p0[3 * j: 3 * j + 3] = (term.amplitude, term.decay, term.frequency)
        starts = [p0]
    else:
        starts = _fit_starts(t, v, m)

    best = None
    for p0 in starts:
        res = damped_gauss_newton(
            lambda p: _kernel_residual(p, t, v),
            p0,
            jacobian=lambda p: _kernel_jacobian(p, t),
            project=_project_kernel_params,
            max_iter=max_iter,
        )
        if best is None or res.rms < best.rms:
            best = res
    params = best.x
    terms = sorted(
        (KernelTerm(params[3 * j], params[3 * j + 1], params[3 * j + 2]) for j in range(m)),
        key=lambda term: -term.amplitude,
    )
    kernel = MemoryKernel(tuple(terms))
    report = KernelFitReport(rms=best.rms, n_iter=best.n_iter,
                             converged=best.converged or best.rms <= rms_tol,
                             n_starts=len(starts))
    if not report.converged:
        raise KernelFitError(
            f"kernel fit did not converge after {best.n_iter} iterations (rms {best.rms:.3e})",
            best=kernel, rms=best.rms)
    return kernel, report


# ---------------------------------------------------------------------------
# kernel files
# ---------------------------------------------------------------------------

def _parse_kernel_lines(lines, source: str) -> MemoryKernel:
    terms = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"{source}:{lineno}: expected 'A gamma omega', got {raw.rstrip()!r}")
        try:
            a, g, w = (float(f) for f in fields)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
        try:
            terms.append(KernelTerm(a, g, w))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    if not terms:
        raise ValueError(f"{source}: no kernel terms found")
    return MemoryKernel(tuple(terms))


def load_kernel(path) -> MemoryKernel:
    """Read a kernel file: one 'A gamma omega' record per line, # comments."""
    with open(path, "r", encoding="utf-8") as fh:
        return _parse_kernel_lines(fh, str(path))


def save_kernel(kernel: MemoryKernel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# A  gamma  omega\n")
        for term in kernel.terms:
            fh.write(f"{term.amplitude!r} {term.decay!r} {term.frequency!r}\n")


def mg24_kernel() -> MemoryKernel:
    """The packaged 5-term Mg+ bath kernel (scaled time units)."""
    data = resources.files("nmqsd.data").joinpath("mg24_kernel").read_text(encoding="utf-8")
    return _parse_kernel_lines(data.splitlines(), "nmqsd/data/mg24_kernel")
