"""Brute-force reference dynamics for a small system plus few bosonic modes.

Builds the full system+bath Hamiltonian with truncated ladder operators,
propagates the total vacuum-bath state by eigendecomposition (exact up to
truncation), and partial-traces the bath.  Used to validate the
stochastic engine against first principles: the bath of m discrete modes
has the exact exponential-sum kernel with zero decay rates, so the same
model can be integrated both ways and compared entrywise in units of the
Monte Carlo standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ensemble import EnsembleConfig, run_ensemble
from .kernel import KernelTerm, MemoryKernel
from .models import Channel, ModelSpec

__all__ = [
    "ComparisonReport",
    "TotalSystem",
    "TruncationError",
    "bath_kernel",
    "build_total_hamiltonian",
    "compare_nmqsd_to_exact",
    "exact_reduced_density",
    "stochastic_model",
    "total_dimension",
]

MAX_TOTAL_DIM = 4096
LEAKAGE_TOL = 1e-6


class TruncationError(RuntimeError):
    """Top Fock level is populated; rerun with a larger n_max."""


@dataclass(frozen=True)
class TotalSystem:
    """System Hamiltonian, one coupling operator, and discrete bath modes."""

    hamiltonian: np.ndarray
    coupling: np.ndarray
    modes: tuple[tuple[float, float], ...]   # (g_j, omega_j), omega_j > 0
    n_max: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian", np.asarray(self.hamiltonian, dtype=np.complex128))
        object.__setattr__(self, "coupling", np.asarray(self.coupling, dtype=np.complex128))
        object.__setattr__(self, "modes", tuple((float(g), float(w)) for g, w in self.modes))
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if total_dimension(self) > MAX_TOTAL_DIM:
            raise ValueError(
                f"total dimension {total_dimension(self)} exceeds cap {MAX_TOTAL_DIM}")

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]


def total_dimension(spec: TotalSystem) -> int:
    return spec.hamiltonian.shape[0] * (spec.n_max + 1) ** len(spec.modes)


def _ladder(n_levels: int) -> np.ndarray:
    a = np.zeros((n_levels, n_levels), dtype=np.complex128)
    for n in range(1, n_levels):
        a[n - 1, n] = math.sqrt(n)
    return a


def build_total_hamiltonian(spec: TotalSystem) -> np.ndarray:
    """H (x) 1 + sum_j g_j (L a_j+ + L+ a_j) + sum_j omega_j a_j+ a_j."""
    n_levels = spec.n_max + 1
    m = len(spec.modes)
    a = _ladder(n_levels)
    n_op = a.conj().T @ a
    eye_mode = np.eye(n_levels, dtype=np.complex128)

    def embed_mode(op: np.ndarray, j: int) -> np.ndarray:
        out = np.eye(1, dtype=np.complex128)
        for k in range(m):
            out = np.kron(out, op if k == j else eye_mode)
        return out

    bath_eye = np.eye(n_levels**m, dtype=np.complex128)
    h_tot = np.kron(spec.hamiltonian, bath_eye)
    for j, (g, w) in enumerate(spec.modes):
        aj = embed_mode(a, j)
        h_tot += g * (np.kron(spec.coupling, aj.conj().T) + np.kron(spec.coupling.conj().T, aj))
        h_tot += w * np.kron(np.eye(spec.dim, dtype=np.complex128), embed_mode(n_op, j))
    return h_tot


def exact_reduced_density(spec: TotalSystem, psi0_system, t_grid) -> np.ndarray:
    """rho(t) on the system, bath starting in the all-modes vacuum.

    The total state is propagated through the eigendecomposition of the
    (Hermitian) total Hamiltonian, so norm and energy are conserved to
    rounding.  Raises :class:`TruncationError` when any mode's top Fock
    level holds more than 1e-6 population at any requested time.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    d = spec.dim
    m = len(spec.modes)
    n_levels = spec.n_max + 1
    psi0_system = np.asarray(psi0_system, dtype=np.complex128)
    if psi0_system.shape != (d,):
        raise ValueError("system initial state has wrong dimension")

    h_tot = build_total_hamiltonian(spec)
    evals, evecs = np.linalg.eigh(h_tot)

    full = np.zeros((d,) + (n_levels,) * m, dtype=np.complex128)
    full[(slice(None),) + (0,) * m] = psi0_system
    psi_tot0 = full.reshape(-1)

    coeff = evecs.conj().T @ psi_tot0
    out = np.empty((t_grid.size, d, d), dtype=np.complex128)
    for n, t in enumerate(t_grid):
        psi_t = evecs @ (np.exp(-1j * evals * t) * coeff)
        shaped = psi_t.reshape((d,) + (n_levels,) * m)
        for j in range(m):
            top = np.moveaxis(shaped, 1 + j, 0)[spec.n_max]
            leak = float(np.sum(np.abs(top) ** 2))
            if leak > LEAKAGE_TOL:
                raise TruncationError(
                    f"mode {j} top Fock level holds {leak:.2e} population at t={t:g}; "
                    f"increase n_max (currently {spec.n_max})")
        mat = shaped.reshape(d, -1)
        out[n] = mat @ mat.conj().T
    return out


def bath_kernel(spec: TotalSystem) -> MemoryKernel:
    """Exact kernel of the discrete vacuum bath: A = g^2, gamma = 0."""
    return MemoryKernel(tuple(KernelTerm(g * g, 0.0, w) for g, w in spec.modes))


def stochastic_model(spec: TotalSystem) -> ModelSpec:
    """The same physics as a one-channel model for the trajectory engine."""
    return ModelSpec(
        dim=spec.dim, hamiltonian=spec.hamiltonian,
        channels=(Channel(spec.coupling, bath_kernel(spec)),),
        label="fewmode", bright_states=(0,),
    )


@dataclass
class ComparisonReport:
    t: np.ndarray
    exact: np.ndarray           # (n_t, d, d)
    estimate: np.ndarray        # (n_t, d, d) ensemble mean
    stderr: np.ndarray          # (n_t, d, d) per-entry MC standard error
    max_abs_dev: np.ndarray     # (d, d) over time
    max_sigma_units: np.ndarray  # (d, d) over time
    n_traj: int

    @property
    def worst_sigma(self) -> float:
        return float(np.max(self.max_sigma_units))


def compare_nmqsd_to_exact(spec: TotalSystem, psi0_system, t_max: float,
                           n_traj: int, dt: float, sample_every: float | None = None,
                           seed: int = 0, workers: int = 1) -> ComparisonReport:
    """Run the trajectory engine against the brute-force solution.

    Reports, per density-matrix entry, the largest absolute deviation
    and the largest deviation in units of the Monte Carlo standard
    error over the sampled time grid.
    """
    if sample_every is None:
        sample_every = max(dt, t_max / 50.0)
    model = stochastic_model(spec)
    cfg = EnsembleConfig(n_traj=n_traj, t_max=t_max, dt=dt, sample_every=sample_every,
                         method="nmqsd", seed=seed, workers=workers, keep_psi=True)
    res = run_ensemble(model, psi0_system, cfg)
    exact = exact_reduced_density(spec, psi0_system, res.t)

    psi = res.psi[res.ok_mask]                     # (n, n_t, d)
    diadics = np.einsum("nti,ntj->ntij", psi, psi.conj())
    n = diadics.shape[0]
    mean = diadics.mean(axis=0)
    se = np.sqrt(
        (diadics.real.std(axis=0, ddof=1) ** 2 + diadics.imag.std(axis=0, ddof=1) ** 2) / n)
    dev = np.abs(mean - exact)
    # floor the error scale so exact-by-construction points (t = 0) do not
    # turn float round-off into huge sigma ratios
    sigma_units = dev / np.maximum(se, 1e-12)
    return ComparisonReport(
        t=res.t, exact=exact, estimate=mean, stderr=se,
        max_abs_dev=dev.max(axis=0), max_sigma_units=sigma_units.max(axis=0),
        n_traj=n,
    )
