"""Compiled trajectory integrators.

Numba translations of the reference steppers in `propagator` and
`markov`.  They consume the per-trajectory random stream in exactly the
same order as the reference code (one standard-normal block per noise
half-step / per step), so reference and compiled paths see identical
noise realizations; agreement of the integrated states is pinned by
tests.  Matrix work is explicit loops: dimensions are tiny (d <= 16)
and loop code beats BLAS dispatch at this size.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SQRT_HALF = math.sqrt(0.5)

STATUS_OK = 0
STATUS_RESIDUAL = 1
STATUS_NONFINITE = 2


@njit(cache=True)
def _mm(out, a, b):
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            s = 0.0 + 0.0j
            for k in range(d):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _mv(out, a, v):
    d = a.shape[0]
    for i in range(d):
        s = 0.0 + 0.0j
        for k in range(d):
            s += a[i, k] * v[k]
        out[i] = s


@njit(cache=True)
def _mv_adjoint(out, a, v):
    """out = a^+ v."""
    d = a.shape[0]
    for i in range(d):
        s = 0.0 + 0.0j
        for k in range(d):
            s += np.conj(a[k, i]) * v[k]
        out[i] = s


@njit(cache=True)
def _vdot(a, b):
    s = 0.0 + 0.0j
    for i in range(a.shape[0]):
        s += np.conj(a[i]) * b[i]
    return s


@njit(cache=True)
def _derivs(u, uinv, v, y, z_minus, z_plus, psi0, h, ls, lds,
            amp, vdecay, chan, n_minus, has_plus,
            du, duinv, dv, dy,
            sv, gsum, ex, mid, w1, w2, wv1, wv2, wv3):
    """Stage derivatives; returns the norm counterterm of this stage."""
    d = u.shape[0]
    nc = ls.shape[0]
    nt = amp.shape[0]

    # normalized state and channel expectations
    _mv(wv1, u, psi0)
    n2 = 0.0
    for i in range(d):
        n2 += wv1[i].real ** 2 + wv1[i].imag ** 2
    inv_norm = 1.0 / math.sqrt(n2)
    for i in range(d):
        wv2[i] = wv1[i] * inv_norm          # psi
    for k in range(nc):
        _mv(wv3, ls[k], wv2)
        ex[k] = _vdot(wv2, wv3)

    # per-channel sums of auxiliary operators and scalars
    for k in range(nc):
        for b in range(2):
            gsum[k, b] = 0.0 + 0.0j
            for i in range(d):
                for j in range(d):
                    sv[k, b, i, j] = 0.0 + 0.0j
    for t in range(nt):
        k = chan[t]
        b = 0 if t < n_minus else 1
        gsum[k, b] += y[t]
        for i in range(d):
            for j in range(d):
                sv[k, b, i, j] += v[t, i, j]

    # norm counterterm
    c = 0.0 + 0.0j
    for k in range(nc):
        _mv(wv1, sv[k, 0], psi0)
        _mv(wv3, u, wv1)
        _mv(wv1, lds[k], wv3)
        exd = np.conj(ex[k])
        for i in range(d):
            wv1[i] -= exd * wv3[i]
        _mv_adjoint(wv3, u, wv1)
        c += _vdot(psi0, wv3)
        if has_plus[k]:
            _mv(wv1, sv[k, 1], psi0)
            _mv(wv3, u, wv1)
            _mv(wv1, ls[k], wv3)
            for i in range(d):
                wv1[i] -= ex[k] * wv3[i]
            _mv_adjoint(wv3, u, wv1)
            c += _vdot(psi0, wv3)

    # dU
    _mm(w1, h, u)
    for i in range(d):
        for j in range(d):
            du[i, j] = -1j * w1[i, j] + c * u[i, j]
    for k in range(nc):
        exd = np.conj(ex[k])
        g = z_minus[k] + gsum[k, 0]
        _mm(w1, ls[k], u)
        for i in range(d):
            for j in range(d):
                du[i, j] += g * (w1[i, j] - ex[k] * u[i, j])
        _mm(w1, u, sv[k, 0])
        _mm(w2, lds[k], w1)
        for i in range(d):
            for j in range(d):
                du[i, j] -= w2[i, j] - exd * w1[i, j]
        if has_plus[k]:
            gp = z_plus[k] + gsum[k, 1]
            _mm(w1, lds[k], u)
            for i in range(d):
                for j in range(d):
                    du[i, j] += gp * (w1[i, j] - exd * u[i, j])
            _mm(w1, u, sv[k, 1])
            _mm(w2, ls[k], w1)
            for i in range(d):
                for j in range(d):
                    du[i, j] -= w2[i, j] - ex[k] * w1[i, j]

    # dUinv = -Uinv dU Uinv
    _mm(w1, uinv, du)
    _mm(duinv, w1, uinv)
    for i in range(d):
        for j in range(d):
            duinv[i, j] = -duinv[i, j]

    # window operators: Uinv L U (and Uinv L^+ U where needed)
    for k in range(nc):
        _mm(w1, ls[k], u)
        _mm(mid[k, 0], uinv, w1)
        if has_plus[k]:
            _mm(w1, lds[k], u)
            _mm(mid[k, 1], uinv, w1)

    for t in range(nt):
        k = chan[t]
        b = 0 if t < n_minus else 1
        dec = vdecay[t]
        a = amp[t]
        for i in range(d):
            for j in range(d):
                dv[t, i, j] = -dec * v[t, i, j] + a * mid[k, b, i, j]
        if b == 0:
            dy[t] = -np.conj(dec) * y[t] + a * np.conj(ex[k])
        else:
            dy[t] = -np.conj(dec) * y[t] + a * ex[k]
    return c


@njit(cache=True)
def _residual(u, uinv, w1):
    d = u.shape[0]
    _mm(w1, u, uinv)
    r = 0.0
    for i in range(d):
        for j in range(d):
            diff = w1[i, j] - (1.0 + 0.0j if i == j else 0.0 + 0.0j)
            r += diff.real ** 2 + diff.imag ** 2
    return math.sqrt(r)


@njit(cache=True)
def _nmqsd_chunk(u, uinv, v, y, xi, eta, psi0, h, ls, lds,
                 amp, vdecay, chan, n_minus, has_plus,
                 noise_decay, noise_sigma, dt,
                 step_offset, record_every, hard_tol, bright,
                 out_psi, out_p, out_norm, out_resid, out_c):
    """Run one chunk of steps; returns (status, steps_done, max_residual)."""
    d = u.shape[0]
    nc = ls.shape[0]
    nt = amp.shape[0]
    n_noise = xi.shape[0]
    chunk = eta.shape[0]

    z_minus = np.zeros(nc, dtype=np.complex128)
    z_plus = np.zeros(nc, dtype=np.complex128)

    # stage state and derivative buffers
    us = np.empty((d, d), dtype=np.complex128)
    uinvs = np.empty((d, d), dtype=np.complex128)
    vs = np.empty((nt, d, d), dtype=np.complex128)
    ys = np.empty(nt, dtype=np.complex128)
    du = np.empty((4, d, d), dtype=np.complex128)
    duinv = np.empty((4, d, d), dtype=np.complex128)
    dv = np.empty((4, nt, d, d), dtype=np.complex128)
    dy = np.empty((4, nt), dtype=np.complex128)

    sv = np.empty((nc, 2, d, d), dtype=np.complex128)
    gsum = np.empty((nc, 2), dtype=np.complex128)
    ex = np.empty(nc, dtype=np.complex128)
    mid = np.empty((nc, 2, d, d), dtype=np.complex128)
    w1 = np.empty((d, d), dtype=np.complex128)
    w2 = np.empty((d, d), dtype=np.complex128)
    wv1 = np.empty(d, dtype=np.complex128)
    wv2 = np.empty(d, dtype=np.complex128)
    wv3 = np.empty(d, dtype=np.complex128)

    stage_dt = np.empty(4)
    stage_dt[0] = 0.0
    stage_dt[1] = 0.5 * dt
    stage_dt[2] = 0.5 * dt
    stage_dt[3] = dt

    max_res = 0.0
    for s in range(chunk):
        # exact noise update to mid-step, read, update to step end
        for t in range(n_noise):
            xi[t] = noise_decay[t] * xi[t] + noise_sigma[t] * eta[s, 0, t]
        for k in range(nc):
            z_minus[k] = 0.0 + 0.0j
            z_plus[k] = 0.0 + 0.0j
        for t in range(n_noise):
            if t < n_minus:
                z_minus[chan[t]] += xi[t]
            else:
                z_plus[chan[t]] += xi[t]
        for t in range(n_noise):
            xi[t] = noise_decay[t] * xi[t] + noise_sigma[t] * eta[s, 1, t]

        for stage in range(4):
            if stage == 0:
                _derivs(u, uinv, v, y, z_minus, z_plus, psi0, h, ls, lds,
                        amp, vdecay, chan, n_minus, has_plus,
                        du[0], duinv[0], dv[0], dy[0],
                        sv, gsum, ex, mid, w1, w2, wv1, wv2, wv3)
            else:
                a = stage_dt[stage]
                prev = stage - 1
                for i in range(d):
                    for j in range(d):
                        us[i, j] = u[i, j] + a * du[prev, i, j]
                        uinvs[i, j] = uinv[i, j] + a * duinv[prev, i, j]
                for t in range(nt):
                    ys[t] = y[t] + a * dy[prev, t]
                    for i in range(d):
                        for j in range(d):
                            vs[t, i, j] = v[t, i, j] + a * dv[prev, t, i, j]
                _derivs(us, uinvs, vs, ys, z_minus, z_plus, psi0, h, ls, lds,
                        amp, vdecay, chan, n_minus, has_plus,
                        du[stage], duinv[stage], dv[stage], dy[stage],
                        sv, gsum, ex, mid, w1, w2, wv1, wv2, wv3)

        sixth = dt / 6.0
        for i in range(d):
            for j in range(d):
                u[i, j] += sixth * (du[0, i, j] + 2.0 * du[1, i, j]
                                    + 2.0 * du[2, i, j] + du[3, i, j])
                uinv[i, j] += sixth * (duinv[0, i, j] + 2.0 * duinv[1, i, j]
                                       + 2.0 * duinv[2, i, j] + duinv[3, i, j])
        for t in range(nt):
            y[t] += sixth * (dy[0, t] + 2.0 * dy[1, t] + 2.0 * dy[2, t] + dy[3, t])
            for i in range(d):
                for j in range(d):
                    v[t, i, j] += sixth * (dv[0, t, i, j] + 2.0 * dv[1, t, i, j]
                                           + 2.0 * dv[2, t, i, j] + dv[3, t, i, j])

        res = _residual(u, uinv, w1)
        if not np.isfinite(res):
            return STATUS_NONFINITE, s + 1, res
        if res > hard_tol:
            return STATUS_RESIDUAL, s + 1, res
        if res > max_res:
            max_res = res

        global_step = step_offset + s + 1
        if global_step % record_every == 0:
            rec = global_step // record_every
            _mv(wv1, u, psi0)
            n2 = 0.0
            for i in range(d):
                n2 += wv1[i].real ** 2 + wv1[i].imag ** 2
            nrm = math.sqrt(n2)
            p = 0.0
            for i in range(d):
                out_psi[rec, i] = wv1[i] / nrm
                if bright[i]:
                    p += (wv1[i].real ** 2 + wv1[i].imag ** 2) / n2
            out_p[rec] = p
            out_norm[rec] = nrm
            out_resid[rec] = res
            # counterterm is state-only (noise-independent)
            out_c[rec] = _derivs(u, uinv, v, y, z_minus, z_plus, psi0, h, ls, lds,
                                 amp, vdecay, chan, n_minus, has_plus,
                                 du[0], duinv[0], dv[0], dy[0],
                                 sv, gsum, ex, mid, w1, w2, wv1, wv2, wv3)
    return STATUS_OK, chunk, max_res


@njit(cache=True)
def _mqsd_chunk(psi, eta, h, ls, lds, ldl, tau, dt,
                step_offset, record_every, bright,
                out_psi, out_p, out_norm):
    """Euler-Maruyama unraveling chunk; returns (status, steps_done)."""
    d = psi.shape[0]
    nc = ls.shape[0]
    chunk = eta.shape[0]
    sqrt_tau_dt = math.sqrt(tau * dt)

    dpsi = np.empty(d, dtype=np.complex128)
    wv1 = np.empty(d, dtype=np.complex128)
    ex = np.empty(nc, dtype=np.complex128)

    for s in range(chunk):
        for k in range(nc):
            _mv(wv1, ls[k], psi)
            ex[k] = _vdot(psi, wv1)
        _mv(dpsi, h, psi)
        for i in range(d):
            dpsi[i] *= -1j
        for k in range(nc):
            exd = np.conj(ex[k])
            _mv(wv1, ls[k], psi)
            for i in range(d):
                dpsi[i] += tau * exd * wv1[i]
            _mv(wv1, ldl[k], psi)
            for i in range(d):
                dpsi[i] += tau * (-0.5) * wv1[i] - 0.5 * tau * exd * ex[k] * psi[i]
        for i in range(d):
            dpsi[i] *= dt
        # stochastic part: dW = eta * sqrt(dt), prefactor sqrt(tau)
        for k in range(nc):
            dw = eta[s, k] * sqrt_tau_dt
            _mv(wv1, ls[k], psi)
            for i in range(d):
                dpsi[i] += dw * (wv1[i] - ex[k] * psi[i])
        n2 = 0.0
        for i in range(d):
            psi[i] += dpsi[i]
            n2 += psi[i].real ** 2 + psi[i].imag ** 2
        if not np.isfinite(n2) or n2 <= 0.0:
            return STATUS_NONFINITE, s + 1
        inv_norm = 1.0 / math.sqrt(n2)
        for i in range(d):
            psi[i] *= inv_norm

        global_step = step_offset + s + 1
        if global_step % record_every == 0:
            rec = global_step // record_every
            p = 0.0
            for i in range(d):
                out_psi[rec, i] = psi[i]
                if bright[i]:
                    p += psi[i].real ** 2 + psi[i].imag ** 2
            out_p[rec] = p
            out_norm[rec] = 1.0
    return STATUS_OK, chunk


# ---------------------------------------------------------------------------
# python wrappers
# ---------------------------------------------------------------------------

def _chunk_sizes(n_steps: int, record_every: int, target: int = 8192):
    # recording uses the global step counter, so chunk boundaries are free
    done = 0
    while done < n_steps:
        chunk = min(target, n_steps - done)
        yield chunk
        done += chunk


def run_nmqsd_fast(model, psi0, n_steps, dt, record_every, seed,
                   trajectory_index, omega_sign, hard_tol):
    from .noise import TrajectoryNoise, trajectory_rng
    from .propagator import TrajectoryAbort, TrajectoryOutput, term_structure

    channels = model.channels
    d = model.dim
    st = term_structure(channels)
    noise = TrajectoryNoise([ch.minus_kernel for ch in channels],
                            [ch.plus_kernel for ch in channels],
                            omega_sign=omega_sign)
    rng = trajectory_rng(seed, trajectory_index)
    noise.init_stationary(rng)
    noise_decay, noise_sigma = noise.step_coefficients(dt / 2)
    if noise.n_total == 0:
        noise_decay = np.zeros(0, dtype=np.complex128)
        noise_sigma = np.zeros(0, dtype=float)

    ls = np.ascontiguousarray(np.stack([ch.coupling for ch in channels])
                              if channels else np.zeros((0, d, d)), dtype=np.complex128)
    lds = np.ascontiguousarray(np.stack([ch.coupling.conj().T for ch in channels])
                               if channels else np.zeros((0, d, d)), dtype=np.complex128)
    has_plus = np.array([ch.plus_kernel is not None for ch in channels], dtype=np.bool_)
    bright = np.zeros(d, dtype=np.bool_)
    for i in model.bright_states:
        bright[i] = True

    psi0 = np.ascontiguousarray(psi0, dtype=np.complex128)
    u = np.eye(d, dtype=np.complex128)
    uinv = np.eye(d, dtype=np.complex128)
    v = np.zeros((st.n_total, d, d), dtype=np.complex128)
    y = np.zeros(st.n_total, dtype=np.complex128)
    xi = noise.xi.copy()

    n_rec = n_steps // record_every + 1
    out_psi = np.empty((n_rec, d), dtype=np.complex128)
    out_p = np.empty(n_rec)
    out_norm = np.empty(n_rec)
    out_resid = np.empty(n_rec)
    out_c = np.empty(n_rec, dtype=np.complex128)
    out_psi[0] = psi0
    out_p[0] = float(np.sum(np.abs(psi0[bright]) ** 2))
    out_norm[0] = 1.0
    out_resid[0] = 0.0
    out_c[0] = 0.0

    h = np.ascontiguousarray(model.hamiltonian, dtype=np.complex128)
    max_res = 0.0
    done = 0
    for chunk in _chunk_sizes(n_steps, record_every):
        raw = rng.standard_normal((chunk, 2, max(noise.n_total, 0), 2))
        eta = (raw[..., 0] + 1j * raw[..., 1]) * SQRT_HALF
        status, steps, res = _nmqsd_chunk(
            u, uinv, v, y, xi, eta, psi0, h, ls, lds,
            st.amplitude, st.vdecay, st.channel, st.n_minus, has_plus,
            noise_decay, noise_sigma, dt,
            done, record_every, hard_tol, bright,
            out_psi, out_p, out_norm, out_resid, out_c)
        max_res = max(max_res, res)
        done += steps
        if status == STATUS_RESIDUAL:
            raise TrajectoryAbort("inverse-propagator residual exceeded hard tolerance",
                                  t=done * dt, residual=res)
        if status == STATUS_NONFINITE:
            raise TrajectoryAbort("non-finite state", t=done * dt, residual=float("nan"))

    return TrajectoryOutput(
        t=np.arange(n_rec) * (record_every * dt),
        psi=out_psi, p=out_p, state_norm=out_norm, inv_residual=out_resid,
        counterterm=out_c, seed=seed, max_inv_residual=max_res,
    )


def run_mqsd_fast(model, psi0, n_steps, dt, record_every, seed,
                  trajectory_index, tau):
    from .noise import trajectory_rng
    from .propagator import TrajectoryAbort, TrajectoryOutput

    channels = model.channels
    d = model.dim
    nc = len(channels)
    ls = np.ascontiguousarray(np.stack([ch.coupling for ch in channels])
                              if channels else np.zeros((0, d, d)), dtype=np.complex128)
    lds = np.ascontiguousarray(np.stack([ch.coupling.conj().T for ch in channels])
                               if channels else np.zeros((0, d, d)), dtype=np.complex128)
    ldl = np.ascontiguousarray(np.stack([ch.coupling.conj().T @ ch.coupling for ch in channels])
                               if channels else np.zeros((0, d, d)), dtype=np.complex128)
    bright = np.zeros(d, dtype=np.bool_)
    for i in model.bright_states:
        bright[i] = True

    rng = trajectory_rng(seed, trajectory_index)
    psi = np.ascontiguousarray(psi0, dtype=np.complex128).copy()

    n_rec = n_steps // record_every + 1
    out_psi = np.empty((n_rec, d), dtype=np.complex128)
    out_p = np.empty(n_rec)
    out_norm = np.empty(n_rec)
    out_psi[0] = psi
    out_p[0] = float(np.sum(np.abs(psi[bright]) ** 2))
    out_norm[0] = 1.0

    h = np.ascontiguousarray(model.hamiltonian, dtype=np.complex128)
    done = 0
    for chunk in _chunk_sizes(n_steps, record_every):
        raw = rng.standard_normal((chunk, max(nc, 0), 2))
        eta = (raw[..., 0] + 1j * raw[..., 1]) * SQRT_HALF
        status, steps = _mqsd_chunk(psi, eta, h, ls, lds, ldl, tau, dt,
                                    done, record_every, bright,
                                    out_psi, out_p, out_norm)
        done += steps
        if status != STATUS_OK:
            raise TrajectoryAbort("non-finite state in Markovian unraveling",
                                  t=done * dt, residual=float("nan"))

    n_rec_arr = np.arange(n_rec) * (record_every * dt)
    return TrajectoryOutput(
        t=n_rec_arr, psi=out_psi, p=out_p, state_norm=out_norm,
        inv_residual=np.zeros(n_rec), counterterm=np.zeros(n_rec, dtype=np.complex128),
        seed=seed, max_inv_residual=0.0,
    )
