"""Norm-preserving stochastic propagator equations with exponential memory.

The trajectory state is the propagator U_t, its co-integrated inverse,
one auxiliary memory operator V per kernel term (the exponential-window
integral of U^-1 L U), and one auxiliary scalar y per term (the same
window applied to the coupling expectation).  Together with the exact
colored-noise components this closes the dynamics into an ODE system
driven by piecewise-frozen noise.

Integration scheme: classical RK4 on the augmented system, with each
channel noise held at its exactly-sampled mid-step value.  The noise has
much slower correlation decay than any step size of interest, so the
frozen-noise ODE is smooth on the step scale and RK4 retains its order
(verified by step-halving tests).  U is not unitary; the product
U U^-1 = 1 is monitored every step as the integration health metric.

The scalar counterterm keeps the propagated state norm constant in exact
arithmetic; expectations always use the normalized state, which is what
makes that cancellation exact.

This module is the readable reference implementation; `run_trajectory`
dispatches to a compiled kernel (`_fast`) that consumes the identical
random stream, and falls back to this implementation on request.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import ModelSpec
from .noise import TrajectoryNoise, trajectory_rng

__all__ = [
    "AugmentedDeriv",
    "AugmentedState",
    "TrajectoryAbort",
    "TrajectoryOutput",
    "drift",
    "initial_state",
    "norm_counterterm",
    "rk4_step",
    "run_trajectory",
    "step",
]

HARD_RESIDUAL_TOL = 1e-3
SOFT_RESIDUAL_TOL = 1e-6


class TrajectoryAbort(RuntimeError):
    """Integration aborted; carries the last good time and diagnostics."""

    def __init__(self, message: str, t: float, residual: float):
        super().__init__(f"{message} (t={t:g}, inverse residual={residual:.3e})")
        self.t = t
        self.residual = residual


@dataclass(frozen=True)
class TermStructure:
    """Flattened (channel, kernel-term) layout shared with the noise stack.

    Order: every emission (minus) term channel-by-channel, then every
    absorption (plus) term channel-by-channel.
    """

    amplitude: np.ndarray     # A per term
    vdecay: np.ndarray        # gamma + i*omega per term
    channel: np.ndarray       # owning channel index
    n_minus: int

    @property
    def n_total(self) -> int:
        return self.amplitude.size

    def is_plus(self, i: int) -> bool:
        return i >= self.n_minus


def term_structure(channels) -> TermStructure:
    amps, decs, chans = [], [], []
    for k, ch in enumerate(channels):
        for term in ch.minus_kernel.terms:
            amps.append(term.amplitude)
            decs.append(term.decay + 1j * term.frequency)
            chans.append(k)
    n_minus = len(amps)
    for k, ch in enumerate(channels):
        if ch.plus_kernel is None:
            continue
        for term in ch.plus_kernel.terms:
            amps.append(term.amplitude)
            decs.append(term.decay + 1j * term.frequency)
            chans.append(k)
    return TermStructure(
        amplitude=np.array(amps, dtype=float),
        vdecay=np.array(decs, dtype=np.complex128),
        channel=np.array(chans, dtype=np.int64),
        n_minus=n_minus,
    )


@dataclass
class AugmentedState:
    t: float
    u: np.ndarray          # (d, d)
    uinv: np.ndarray       # (d, d)
    v: np.ndarray          # (n_terms, d, d) auxiliary memory operators
    y: np.ndarray          # (n_terms,) auxiliary memory scalars
    psi0: np.ndarray       # (d,) fixed initial state

    @property
    def psi(self) -> np.ndarray:
        """Normalized propagated state."""
        phi = self.u @ self.psi0
        return phi / np.linalg.norm(phi)

    @property
    def state_norm(self) -> float:
        return float(np.linalg.norm(self.u @ self.psi0))

    def inverse_residual(self) -> float:
        d = self.u.shape[0]
        return float(np.linalg.norm(self.u @ self.uinv - np.eye(d)))

    def copy(self) -> "AugmentedState":
        return AugmentedState(self.t, self.u.copy(), self.uinv.copy(),
                              self.v.copy(), self.y.copy(), self.psi0)


@dataclass
class AugmentedDeriv:
    du: np.ndarray
    duinv: np.ndarray
    dv: np.ndarray
    dy: np.ndarray


def initial_state(channels, psi0: np.ndarray) -> AugmentedState:
    """U = U^-1 = 1, all auxiliaries zero."""
    psi0 = np.asarray(psi0, dtype=np.complex128)
    d = psi0.size
    n = np.linalg.norm(psi0)
    if not math.isclose(n, 1.0, rel_tol=0.0, abs_tol=1e-9):
        raise ValueError(f"initial state must be normalized, got |psi0| = {n}")
    st = term_structure(channels)
    return AugmentedState(
        t=0.0,
        u=np.eye(d, dtype=np.complex128),
        uinv=np.eye(d, dtype=np.complex128),
        v=np.zeros((st.n_total, d, d), dtype=np.complex128),
        y=np.zeros(st.n_total, dtype=np.complex128),
        psi0=psi0,
    )


def _channel_expectations(channels, psi: np.ndarray) -> np.ndarray:
    return np.array([np.vdot(psi, ch.coupling @ psi) for ch in channels])


def _sum_v(state: AugmentedState, st: TermStructure, n_channels: int):
    d = state.u.shape[0]
    sv_minus = np.zeros((n_channels, d, d), dtype=np.complex128)
    sv_plus = np.zeros((n_channels, d, d), dtype=np.complex128)
    g_minus = np.zeros(n_channels, dtype=np.complex128)
    g_plus = np.zeros(n_channels, dtype=np.complex128)
    for i in range(st.n_total):
        k = st.channel[i]
        if i < st.n_minus:
            sv_minus[k] += state.v[i]
            g_minus[k] += state.y[i]
        else:
            sv_plus[k] += state.v[i]
            g_plus[k] += state.y[i]
    return sv_minus, sv_plus, g_minus, g_plus


def norm_counterterm(state: AugmentedState, channels) -> complex:
    """Scalar that cancels the norm drift of the propagated state.

    Sum over channels of <psi0| U^+ (L^+ - <L^+>) U [sum_j V_minus] |psi0>,
    plus the conjugate-coupling analogue for absorption terms.
    """
    st = term_structure(channels)
    sv_minus, sv_plus, _, _ = _sum_v(state, st, len(channels))
    psi = state.psi
    ex = _channel_expectations(channels, psi)
    u_dag = state.u.conj().T
    c = 0.0 + 0.0j
    for k, ch in enumerate(channels):
        ld = ch.coupling.conj().T
        s = state.u @ (sv_minus[k] @ state.psi0)
        c += np.vdot(state.psi0, u_dag @ (ld @ s - np.conj(ex[k]) * s))
        if ch.plus_kernel is not None:
            s = state.u @ (sv_plus[k] @ state.psi0)
            c += np.vdot(state.psi0, u_dag @ (ch.coupling @ s - ex[k] * s))
    return complex(c)


def drift(state: AugmentedState, channels, h: np.ndarray,
          z_minus: np.ndarray, z_plus: np.ndarray) -> AugmentedDeriv:
    """Time derivative of (U, U^-1, V, y) at frozen noise values."""
    st = term_structure(channels)
    n_channels = len(channels)
    sv_minus, sv_plus, y_minus_sum, y_plus_sum = _sum_v(state, st, n_channels)
    u = state.u
    psi = state.psi
    ex = _channel_expectations(channels, psi)
    ex_dag = np.conj(ex)

    u_dag = u.conj().T
    c = 0.0 + 0.0j
    for k, ch in enumerate(channels):
        ld = ch.coupling.conj().T
        s = u @ (sv_minus[k] @ state.psi0)
        c += np.vdot(state.psi0, u_dag @ (ld @ s - ex_dag[k] * s))
        if ch.plus_kernel is not None:
            s = u @ (sv_plus[k] @ state.psi0)
            c += np.vdot(state.psi0, u_dag @ (ch.coupling @ s - ex[k] * s))

    du = -1j * (h @ u) + c * u
    for k, ch in enumerate(channels):
        lu = ch.coupling @ u
        ldu = ch.coupling.conj().T @ u
        g = z_minus[k] + y_minus_sum[k]
        du += g * (lu - ex[k] * u)
        usv = u @ sv_minus[k]
        du -= ch.coupling.conj().T @ usv - ex_dag[k] * usv
        if ch.plus_kernel is not None:
            gp = z_plus[k] + y_plus_sum[k]
            du += gp * (ldu - ex_dag[k] * u)
            usvp = u @ sv_plus[k]
            du -= ch.coupling @ usvp - ex[k] * usvp

    duinv = -state.uinv @ du @ state.uinv

    dv = np.empty_like(state.v)
    dy = np.empty_like(state.y)
    mid_minus = [state.uinv @ (ch.coupling @ u) for ch in channels]
    mid_plus = [state.uinv @ (ch.coupling.conj().T @ u) for ch in channels]
    for i in range(st.n_total):
        k = st.channel[i]
        if i < st.n_minus:
            dv[i] = -st.vdecay[i] * state.v[i] + st.amplitude[i] * mid_minus[k]
            dy[i] = -np.conj(st.vdecay[i]) * state.y[i] + st.amplitude[i] * ex_dag[k]
        else:
            dv[i] = -st.vdecay[i] * state.v[i] + st.amplitude[i] * mid_plus[k]
            dy[i] = -np.conj(st.vdecay[i]) * state.y[i] + st.amplitude[i] * ex[k]
    return AugmentedDeriv(du=du, duinv=duinv, dv=dv, dy=dy)


def _blend(state: AugmentedState, deriv: AugmentedDeriv, dt: float) -> AugmentedState:
    return AugmentedState(
        t=state.t + dt,
        u=state.u + dt * deriv.du,
        uinv=state.uinv + dt * deriv.duinv,
        v=state.v + dt * deriv.dv,
        y=state.y + dt * deriv.dy,
        psi0=state.psi0,
    )


def rk4_step(state: AugmentedState, channels, h: np.ndarray, dt: float,
             z_minus: np.ndarray, z_plus: np.ndarray) -> AugmentedState:
    """One classical RK4 step at frozen noise values."""
    k1 = drift(state, channels, h, z_minus, z_plus)
    k2 = drift(_blend(state, k1, dt / 2), channels, h, z_minus, z_plus)
    k3 = drift(_blend(state, k2, dt / 2), channels, h, z_minus, z_plus)
    k4 = drift(_blend(state, k3, dt), channels, h, z_minus, z_plus)
    out = state.copy()
    out.t = state.t + dt
    out.u = state.u + (dt / 6) * (k1.du + 2 * k2.du + 2 * k3.du + k4.du)
    out.uinv = state.uinv + (dt / 6) * (k1.duinv + 2 * k2.duinv + 2 * k3.duinv + k4.duinv)
    out.v = state.v + (dt / 6) * (k1.dv + 2 * k2.dv + 2 * k3.dv + k4.dv)
    out.y = state.y + (dt / 6) * (k1.dy + 2 * k2.dy + 2 * k3.dy + k4.dy)
    return out


def step(state: AugmentedState, channels, h: np.ndarray, dt: float,
         rng: np.random.Generator, noise: TrajectoryNoise,
         hard_tol: float = HARD_RESIDUAL_TOL) -> AugmentedState:
    """Advance noise exactly by dt and the augmented state by one RK4 step.

    The noise is read at mid-step (two exact half-updates bracket the
    read), then held frozen across the four stages.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    noise.advance(dt / 2, rng)
    z_minus, z_plus = noise.z_values()
    noise.advance(dt / 2, rng)
    out = rk4_step(state, channels, h, dt, z_minus, z_plus)
    residual = out.inverse_residual()
    if not np.isfinite(residual):
        raise TrajectoryAbort("non-finite state", t=state.t, residual=residual)
    if residual > hard_tol:
        raise TrajectoryAbort("inverse-propagator residual exceeded hard tolerance",
                              t=out.t, residual=residual)
    return out


@dataclass
class TrajectoryOutput:
    """Sampled observables of one trajectory (state samples normalized)."""

    t: np.ndarray             # (n_rec,)
    psi: np.ndarray           # (n_rec, d) normalized state samples
    p: np.ndarray             # (n_rec,) bright-manifold population
    state_norm: np.ndarray    # (n_rec,) raw |U psi0|
    inv_residual: np.ndarray  # (n_rec,) |U U^-1 - 1|_F
    counterterm: np.ndarray   # (n_rec,) complex norm-counterterm diagnostic
    seed: int
    max_inv_residual: float


def _bright_population(psi: np.ndarray, bright_states) -> float:
    return float(sum(abs(psi[i]) ** 2 for i in bright_states))


def run_trajectory(model: ModelSpec, psi0, t_max: float, dt: float,
                   sample_every: float, seed: int, *,
                   trajectory_index: int = 0,
                   omega_sign: int = -1,
                   use_reference: bool = False,
                   hard_tol: float = HARD_RESIDUAL_TOL) -> TrajectoryOutput:
    """Integrate one trajectory; fully deterministic given (seed, index).

    Noise starts from its stationary distribution, auxiliaries at zero,
    U = U^-1 = 1.  Observables are recorded every ``sample_every`` time
    units (which must be an integer multiple of dt), beginning at t = 0.
    """
    if t_max <= 0.0 or dt <= 0.0:
        raise ValueError("t_max and dt must be > 0")
    record_every = int(round(sample_every / dt))
    if record_every < 1 or abs(record_every * dt - sample_every) > 1e-9 * sample_every:
        raise ValueError("sample_every must be a positive integer multiple of dt")
    n_steps = int(round(t_max / dt))
    psi0 = np.asarray(psi0, dtype=np.complex128)

    if not use_reference:
        from ._fast import run_nmqsd_fast
        return run_nmqsd_fast(model, psi0, n_steps, dt, record_every, seed,
                              trajectory_index, omega_sign, hard_tol)

    rng = trajectory_rng(seed, trajectory_index)
    noise = TrajectoryNoise([ch.minus_kernel for ch in model.channels],
                            [ch.plus_kernel for ch in model.channels],
                            omega_sign=omega_sign)
    noise.init_stationary(rng)
    state = initial_state(model.channels, psi0)
    h = model.hamiltonian

    n_rec = n_steps // record_every + 1
    out = TrajectoryOutput(
        t=np.empty(n_rec), psi=np.empty((n_rec, model.dim), dtype=np.complex128),
        p=np.empty(n_rec), state_norm=np.empty(n_rec), inv_residual=np.empty(n_rec),
        counterterm=np.empty(n_rec, dtype=np.complex128), seed=seed,
        max_inv_residual=0.0,
    )

    def record(idx: int):
        psi = state.psi
        out.t[idx] = state.t
        out.psi[idx] = psi
        out.p[idx] = _bright_population(psi, model.bright_states)
        out.state_norm[idx] = state.state_norm
        out.inv_residual[idx] = state.inverse_residual()
        out.counterterm[idx] = norm_counterterm(state, model.channels)

    record(0)
    rec = 1
    for n in range(1, n_steps + 1):
        state = step(state, model.channels, h, dt, rng, noise, hard_tol=hard_tol)
        res = state.inverse_residual()
        out.max_inv_residual = max(out.max_inv_residual, res)
        if n % record_every == 0:
            record(rec)
            rec += 1
    return out
