"""Markovian limit: Lindblad master equation and its diffusive unraveling.

The deterministic master equation (the ensemble-level oracle) is
integrated with classical RK4.  Because the equation is linear, one RK4
step is a fixed linear map on the vectorized density; we build that map
once and apply it repeatedly, which is identical to stepwise RK4 but
runs at matrix-vector speed.

The trajectory-level unraveling is the standard norm-preserving quantum
state diffusion Ito equation, integrated by Euler-Maruyama with
post-step renormalization.  Its diadic ensemble mean reproduces the
master equation, which is the property the tests pin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import memory_time
from .models import ModelSpec
from .noise import standard_complex_normals, trajectory_rng
from .propagator import TrajectoryOutput

__all__ = [
    "DensityMatrixError",
    "common_memory_time",
    "lindblad_rhs",
    "liouvillian",
    "propagate_lindblad",
    "qsd_step",
    "run_trajectory_markov",
    "steady_state",
    "validate_density",
]


class DensityMatrixError(ValueError):
    """Density matrix invariant violated beyond tolerance."""


def validate_density(rho: np.ndarray, *, herm_tol: float = 1e-12,
                     trace_tol: float = 1e-10, pos_tol: float = 1e-8) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.complex128)
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    if herm > herm_tol:
        raise DensityMatrixError(f"not Hermitian: max asymmetry {herm:.3e}")
    tr = complex(np.trace(rho))
    if abs(tr - 1.0) > trace_tol:
        raise DensityMatrixError(f"trace {tr} deviates from 1 beyond {trace_tol}")
    evals = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if evals.min() < -pos_tol:
        raise DensityMatrixError(f"negative eigenvalue {evals.min():.3e}")
    return rho


def common_memory_time(model: ModelSpec) -> float:
    """Shared memory time of all channels (they must agree to 1e-9 relative)."""
    taus = [memory_time(ch.minus_kernel) for ch in model.channels]
    if not taus:
        raise ValueError("model has no coupling channels")
    tau = taus[0]
    if any(abs(t - tau) > 1e-9 * max(abs(tau), 1.0) for t in taus):
        raise ValueError("channels do not share a common memory time")
    return tau


def lindblad_rhs(rho: np.ndarray, h: np.ndarray, ls, tau: float) -> np.ndarray:
    """-i[H, rho] + tau * sum_k (L rho L+ - 1/2 {L+L, rho})."""
    if tau <= 0.0:
        raise ValueError("tau must be > 0")
    out = -1j * (h @ rho - rho @ h)
    for l in ls:
        ld = l.conj().T
        ldl = ld @ l
        out += tau * (l @ rho @ ld - 0.5 * (ldl @ rho + rho @ ldl))
    return out


def liouvillian(h: np.ndarray, ls, tau: float) -> np.ndarray:
    """Matrix of the master equation on row-major vectorized densities."""
    d = h.shape[0]
    eye = np.eye(d, dtype=np.complex128)
    m = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for l in ls:
        ld = l.conj().T
        ldl = ld @ l
        m += tau * (np.kron(l, l.conj())
                    - 0.5 * np.kron(ldl, eye) - 0.5 * np.kron(eye, ldl.T))
    return m


def propagate_lindblad(rho0: np.ndarray, model: ModelSpec, t_max: float, dt: float,
                       sample_every: float | None = None, tau: float | None = None):
    """RK4 time series of the master equation; returns (t_grid, rho_series).

    Every sampled output is validated against the density-matrix
    invariants (Hermiticity, unit trace, positivity within tolerance).
    """
    rho0 = validate_density(rho0)
    if t_max <= 0.0 or dt <= 0.0:
        raise ValueError("t_max and dt must be > 0")
    if sample_every is None:
        sample_every = dt
    record_every = int(round(sample_every / dt))
    if record_every < 1 or abs(record_every * dt - sample_every) > 1e-9 * sample_every:
        raise ValueError("sample_every must be a positive integer multiple of dt")
    if tau is None:
        # without channels the rate prefactor never enters
        tau = common_memory_time(model) if model.channels else 1.0
    d = model.dim
    ls = [ch.coupling for ch in model.channels]
    a = liouvillian(model.hamiltonian, ls, tau) * dt
    eye = np.eye(d * d, dtype=np.complex128)
    e_step = eye + a + a @ a / 2.0 + a @ a @ a / 6.0 + a @ a @ a @ a / 24.0

    n_steps = int(round(t_max / dt))
    n_rec = n_steps // record_every + 1
    t_grid = np.arange(n_rec) * (record_every * dt)
    series = np.empty((n_rec, d, d), dtype=np.complex128)
    vec = rho0.reshape(-1).copy()
    series[0] = rho0
    rec = 1
    for n in range(1, n_steps + 1):
        vec = e_step @ vec
        if n % record_every == 0:
            rho = vec.reshape(d, d)
            # symmetrize away accumulated floating round-off before validating
            rho = 0.5 * (rho + rho.conj().T)
            series[rec] = validate_density(rho)
            rec += 1
    return t_grid, series


def steady_state(model: ModelSpec, tau: float | None = None) -> np.ndarray:
    """Null vector of the Liouvillian, normalized to unit trace."""
    if tau is None:
        tau = common_memory_time(model)
    m = liouvillian(model.hamiltonian, [ch.coupling for ch in model.channels], tau)
    vals, vecs = np.linalg.eig(m)
    rho = vecs[:, np.argmin(np.abs(vals))].reshape(model.dim, model.dim)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def qsd_step(psi: np.ndarray, h: np.ndarray, ls, tau: float, dt: float,
             rng: np.random.Generator) -> np.ndarray:
    """One Euler-Maruyama step of the norm-preserving diffusive unraveling.

    d psi = [-iH + tau sum(<L+>L - L+L/2 - <L+><L>/2)] psi dt
            + sqrt(tau) sum (L - <L>) psi dW_k,   then renormalized.
    """
    if dt <= 0.0 or tau <= 0.0:
        raise ValueError("dt and tau must be > 0")
    psi = np.asarray(psi, dtype=np.complex128)
    dpsi = -1j * (h @ psi)
    exs = []
    for l in ls:
        lpsi = l @ psi
        ex = np.vdot(psi, lpsi)
        exs.append((l, lpsi, ex))
        dpsi += tau * (np.conj(ex) * lpsi - 0.5 * (l.conj().T @ lpsi)
                       - 0.5 * np.conj(ex) * ex * psi)
    out = psi + dpsi * dt
    dws = standard_complex_normals(rng, (len(ls),)) * math.sqrt(dt)
    for (l, lpsi, ex), dw in zip(exs, np.atleast_1d(dws)):
        out += math.sqrt(tau) * dw * (lpsi - ex * psi)
    n = np.linalg.norm(out)
    if not np.isfinite(n) or n <= 0.0:
        raise FloatingPointError("non-finite state in unraveling step")
    return out / n


def run_trajectory_markov(model: ModelSpec, psi0, t_max: float, dt: float,
                          sample_every: float, seed: int, *,
                          trajectory_index: int = 0,
                          tau: float | None = None,
                          use_reference: bool = False) -> TrajectoryOutput:
    """Diffusive-unraveling trajectory; deterministic given (seed, index)."""
    if t_max <= 0.0 or dt <= 0.0:
        raise ValueError("t_max and dt must be > 0")
    record_every = int(round(sample_every / dt))
    if record_every < 1 or abs(record_every * dt - sample_every) > 1e-9 * sample_every:
        raise ValueError("sample_every must be a positive integer multiple of dt")
    if tau is None:
        tau = common_memory_time(model) if model.channels else 1.0
    n_steps = int(round(t_max / dt))
    psi0 = np.asarray(psi0, dtype=np.complex128)

    if not use_reference:
        from ._fast import run_mqsd_fast
        return run_mqsd_fast(model, psi0, n_steps, dt, record_every, seed,
                             trajectory_index, tau)

    rng = trajectory_rng(seed, trajectory_index)
    ls = [ch.coupling for ch in model.channels]
    h = model.hamiltonian
    n_rec = n_steps // record_every + 1
    out = TrajectoryOutput(
        t=np.arange(n_rec) * (record_every * dt),
        psi=np.empty((n_rec, model.dim), dtype=np.complex128),
        p=np.empty(n_rec), state_norm=np.ones(n_rec),
        inv_residual=np.zeros(n_rec),
        counterterm=np.zeros(n_rec, dtype=np.complex128),
        seed=seed, max_inv_residual=0.0,
    )
    psi = psi0.copy()
    out.psi[0] = psi
    out.p[0] = float(sum(abs(psi[i]) ** 2 for i in model.bright_states))
    rec = 1
    for n in range(1, n_steps + 1):
        psi = qsd_step(psi, h, ls, tau, dt, rng)
        if n % record_every == 0:
            out.psi[rec] = psi
            out.p[rec] = float(sum(abs(psi[i]) ** 2 for i in model.bright_states))
            rec += 1
    return out
