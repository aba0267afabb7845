"""Colored complex Gaussian noise with exponential-sum covariance.

Each kernel term drives one complex Ornstein-Uhlenbeck component; the
channel noise is their sum.  Updates use the exact one-step conditional
distribution, so the generated process is unbiased for any step size and
the only discretization error in a simulation comes from the propagator
integrator.

Sign convention: integrating the generator equation
``d xi = -(gamma + i omega) xi dt + sqrt(2 gamma A) dW`` produces a
process whose measured covariance is ``M[z_t* z_s] = conj(alpha(t, s))``.
The default ``omega_sign = -1`` flips the rotation so that the measured
``M[z_t* z_s]`` equals the kernel itself, which is the self-consistency
the propagator needs; ``omega_sign = +1`` reproduces the generator
equation literally.  Covariance tests pin both behaviors.

Per-trajectory random streams are counter-based (Philox keyed by master
seed and trajectory index): reproducible and collision-free under any
parallel schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import MemoryKernel

__all__ = [
    "CovarianceEstimate",
    "NoiseChannel",
    "TrajectoryNoise",
    "complex_wiener_increment",
    "estimate_covariance",
    "standard_complex_normals",
    "trajectory_rng",
]

_SQRT_HALF = math.sqrt(0.5)


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for one trajectory of one run."""
    if master_seed < 0 or index < 0:
        raise ValueError("master seed and trajectory index must be non-negative")
    return np.random.Generator(np.random.Philox(key=np.array([master_seed, index], dtype=np.uint64)))


def standard_complex_normals(rng: np.random.Generator, shape=()) -> np.ndarray:
    """Circular complex normals with unit variance: M[|eta|^2]=1, M[eta^2]=0."""
    raw = rng.standard_normal(tuple(np.atleast_1d(shape)) + (2,)) if shape != () \
        else rng.standard_normal(2)
    raw = np.asarray(raw)
    return (raw[..., 0] + 1j * raw[..., 1]) * _SQRT_HALF


def complex_wiener_increment(rng: np.random.Generator, dt: float) -> complex:
    """One complex Wiener increment: M[dW dW] = 0, M[|dW|^2] = dt."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    x, y = rng.standard_normal(2)
    return complex(x, y) * math.sqrt(0.5 * dt)


def _ou_coefficients(kernel: MemoryKernel, dt: float, omega_sign: int):
    """Exact one-step decay factor and innovation scale per term."""
    g = kernel.decays()
    w = kernel.frequencies()
    a = kernel.amplitudes()
    decay = np.exp(-(g + 1j * omega_sign * w) * dt)
    sigma = np.sqrt(a * (-np.expm1(-2.0 * g * dt)))
    return decay, sigma


@dataclass
class NoiseChannel:
    """Noise for one coupling channel: one OU component per kernel term.

    ``xi`` is the current per-term state; ``z`` is its sum.  Terms with
    gamma = 0 (discrete bath modes) degenerate to a frozen complex
    Gaussian amplitude rotating deterministically, which is the exact
    gamma -> 0 limit of both the stationary draw and the update.
    """

    kernel: MemoryKernel
    omega_sign: int = -1
    xi: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.omega_sign not in (-1, 1):
            raise ValueError("omega_sign must be +1 or -1")
        if self.xi is None:
            self.xi = np.zeros(self.kernel.n_terms, dtype=np.complex128)

    @classmethod
    def stationary(cls, kernel: MemoryKernel, rng: np.random.Generator,
                   omega_sign: int = -1) -> "NoiseChannel":
        """Draw the stationary state: each xi_j circular Gaussian of variance A_j."""
        chan = cls(kernel=kernel, omega_sign=omega_sign)
        chan.init_stationary(rng)
        return chan

    def init_stationary(self, rng: np.random.Generator) -> None:
        eta = standard_complex_normals(rng, (self.kernel.n_terms,))
        self.xi = np.sqrt(self.kernel.amplitudes()) * eta

    def advance(self, dt: float, rng: np.random.Generator) -> None:
        """Exact-in-distribution update over dt."""
        if dt <= 0.0:
            raise ValueError("dt must be > 0")
        decay, sigma = _ou_coefficients(self.kernel, dt, self.omega_sign)
        eta = standard_complex_normals(rng, (self.kernel.n_terms,))
        self.xi = decay * self.xi + sigma * eta

    @property
    def z(self) -> complex:
        return complex(self.xi.sum())


@dataclass
class CovarianceEstimate:
    lags: np.ndarray
    covariance: np.ndarray          # M[z_lag* z_0]
    pseudo: np.ndarray              # M[z_lag z_0]
    stderr_covariance: np.ndarray   # (n_lags, 2): per-component (re, im) errors
    stderr_pseudo: np.ndarray
    kernel_values: np.ndarray       # alpha(lag, 0) for reference

    def combined_stderr_covariance(self) -> np.ndarray:
        return np.hypot(self.stderr_covariance[:, 0], self.stderr_covariance[:, 1])

    def combined_stderr_pseudo(self) -> np.ndarray:
        return np.hypot(self.stderr_pseudo[:, 0], self.stderr_pseudo[:, 1])


def estimate_covariance(kernel: MemoryKernel, lags, n_paths: int = 10_000,
                        master_seed: int = 0, omega_sign: int = -1) -> CovarianceEstimate:
    """Monte Carlo estimate of M[z_t* z_s] and M[z_t z_s] at the given lags.

    Paths start from independent stationary draws and are advanced with
    exact updates directly from lag to lag (no intermediate stepping
    needed).  Standard errors are per-component sample errors of the
    mean, combined as sqrt(se_re^2 + se_im^2).
    """
    lags = np.sort(np.asarray(lags, dtype=float))
    if lags[0] < 0.0:
        raise ValueError("lags must be >= 0")
    rng = trajectory_rng(master_seed, 0)
    n_terms = kernel.n_terms
    amp = np.sqrt(kernel.amplitudes())
    xi = amp * standard_complex_normals(rng, (n_paths, n_terms))
    z0 = xi.sum(axis=1)
    cov = np.empty(lags.size, dtype=complex)
    pseudo = np.empty(lags.size, dtype=complex)
    se_cov = np.empty((lags.size, 2))
    se_pseudo = np.empty((lags.size, 2))
    prev = 0.0
    for i, lag in enumerate(lags):
        step = lag - prev
        if step > 0.0:
            decay, sigma = _ou_coefficients(kernel, step, omega_sign)
            eta = standard_complex_normals(rng, (n_paths, n_terms))
            xi = decay * xi + sigma * eta
            prev = lag
        z = xi.sum(axis=1)
        for samples, out, se in ((np.conj(z) * z0, cov, se_cov),
                                 (z * z0, pseudo, se_pseudo)):
            out[i] = samples.mean()
            se[i, 0] = samples.real.std(ddof=1) / math.sqrt(n_paths)
            se[i, 1] = samples.imag.std(ddof=1) / math.sqrt(n_paths)
    return CovarianceEstimate(
        lags=lags, covariance=cov, pseudo=pseudo,
        stderr_covariance=se_cov, stderr_pseudo=se_pseudo,
        kernel_values=np.array([kernel.eval(lag, 0.0) for lag in lags]),
    )


class TrajectoryNoise:
    """All noise components of one trajectory, in canonical draw order.

    Flattens (channel, term) pairs into single arrays: all emission
    (minus) terms channel-by-channel, then all absorption (plus) terms.
    One standard-normal block is drawn per advance, so a step-by-step
    driver and a chunked pre-drawing driver consume the random stream
    identically.
    """

    def __init__(self, minus_kernels, plus_kernels, omega_sign: int = -1):
        amps, decs, freqs, chans = [], [], [], []
        self.n_channels = len(minus_kernels)
        for k, kern in enumerate(minus_kernels):
            for term in kern.terms:
                amps.append(term.amplitude)
                decs.append(term.decay)
                freqs.append(term.frequency)
                chans.append(k)
        self.n_minus = len(amps)
        for k, kern in enumerate(plus_kernels):
            if kern is None:
                continue
            for term in kern.terms:
                amps.append(term.amplitude)
                decs.append(term.decay)
                freqs.append(term.frequency)
                chans.append(k)
        self.amplitude = np.array(amps, dtype=float)
        self.decay = np.array(decs, dtype=float)
        self.frequency = np.array(freqs, dtype=float)
        self.channel = np.array(chans, dtype=np.int64)
        self.omega_sign = omega_sign
        self.n_total = len(amps)
        self.xi = np.zeros(self.n_total, dtype=np.complex128)

    def init_stationary(self, rng: np.random.Generator) -> None:
        eta = standard_complex_normals(rng, (self.n_total,)) if self.n_total else \
            np.zeros(0, dtype=np.complex128)
        self.xi = np.sqrt(self.amplitude) * eta

    def step_coefficients(self, dt: float):
        decay = np.exp(-(self.decay + 1j * self.omega_sign * self.frequency) * dt)
        sigma = np.sqrt(self.amplitude * (-np.expm1(-2.0 * self.decay * dt)))
        return decay, sigma

    def advance(self, dt: float, rng: np.random.Generator) -> None:
        if self.n_total == 0:
            return
        decay, sigma = self.step_coefficients(dt)
        eta = standard_complex_normals(rng, (self.n_total,))
        self.xi = decay * self.xi + sigma * eta

    def z_values(self) -> tuple[np.ndarray, np.ndarray]:
        """(z_minus per channel, z_plus per channel)."""
        z_minus = np.zeros(self.n_channels, dtype=np.complex128)
        z_plus = np.zeros(self.n_channels, dtype=np.complex128)
        for i in range(self.n_minus):
            z_minus[self.channel[i]] += self.xi[i]
        for i in range(self.n_minus, self.n_total):
            z_plus[self.channel[i]] += self.xi[i]
        return z_minus, z_plus
