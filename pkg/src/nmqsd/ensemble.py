"""Monte Carlo ensemble driver with deterministic parallel reduction.

Trajectory indices are split into fixed-size contiguous blocks; each
block is integrated (serially, in index order) by one task and reduced
into block partial sums.  The final reduction walks blocks in index
order, so the result is bit-identical for any worker count and any task
scheduling.  Per-trajectory seeds derive from (master seed, trajectory
index) via counter-based streams, never from worker identity.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .markov import common_memory_time, run_trajectory_markov
from .models import ModelSpec
from .propagator import TrajectoryAbort, TrajectoryOutput, run_trajectory

__all__ = [
    "EnsembleConfig",
    "EnsembleFailure",
    "EnsembleResult",
    "run_ensemble",
    "signal_matrix",
    "write_run_outputs",
]

MAX_FAILURE_FRACTION = 0.05
N_DETAIL_TRAJECTORIES = 6


class EnsembleFailure(RuntimeError):
    """Too many trajectories aborted; the step size or model is suspect."""


@dataclass(frozen=True)
class EnsembleConfig:
    n_traj: int
    t_max: float
    dt: float
    sample_every: float
    method: str = "nmqsd"
    seed: int = 0
    workers: int = 1
    block_size: int = 16
    keep_psi: bool = False
    omega_sign: int = -1

    def __post_init__(self):
        if self.method not in ("nmqsd", "mqsd"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.t_max <= 0.0 or self.dt <= 0.0:
            raise ValueError("t_max and dt must be > 0")
        if self.sample_every < self.dt:
            raise ValueError("sample_every must be >= dt")
        if self.workers < 1 or self.block_size < 1:
            raise ValueError("workers and block_size must be >= 1")


@dataclass
class EnsembleResult:
    t: np.ndarray                  # (n_t,)
    rho: np.ndarray                # (n_t, d, d) diadic mean over surviving trajectories
    diag_stderr: np.ndarray        # (n_t, d) standard error of diagonal entries
    p_table: np.ndarray            # (n_traj, n_t); aborted rows are NaN
    n_failed: int
    failures: tuple
    config: EnsembleConfig
    model_label: str
    wall_time: float
    psi: np.ndarray | None = None  # (n_traj, n_t, d) when keep_psi
    detail: tuple = ()             # (index, TrajectoryOutput) for the first few
    max_inv_residual: float = 0.0

    @property
    def ok_mask(self) -> np.ndarray:
        return ~np.isnan(self.p_table[:, 0])


def _integrate_one(model: ModelSpec, psi0, cfg: EnsembleConfig, index: int) -> TrajectoryOutput:
    if cfg.method == "nmqsd":
        return run_trajectory(model, psi0, cfg.t_max, cfg.dt, cfg.sample_every,
                              cfg.seed, trajectory_index=index, omega_sign=cfg.omega_sign)
    return run_trajectory_markov(model, psi0, cfg.t_max, cfg.dt, cfg.sample_every,
                                 cfg.seed, trajectory_index=index)


def _run_block(args):
    """Integrate one contiguous index block; reduce in index order."""
    model, psi0, cfg, start, stop, n_t = args
    d = model.dim
    b = stop - start
    p_rows = np.full((b, n_t), np.nan)
    rho_sum = np.zeros((n_t, d, d), dtype=np.complex128)
    diag_sum = np.zeros((n_t, d))
    diag_sumsq = np.zeros((n_t, d))
    psi_block = np.full((b, n_t, d), np.nan, dtype=np.complex128) if cfg.keep_psi else None
    failures = []
    detail = []
    max_res = 0.0
    for offset, index in enumerate(range(start, stop)):
        try:
            traj = _integrate_one(model, psi0, cfg, index)
        except TrajectoryAbort as exc:
            failures.append((index, str(exc)))
            continue
        p_rows[offset] = traj.p
        pops = np.abs(traj.psi) ** 2
        rho_sum += np.einsum("ti,tj->tij", traj.psi, traj.psi.conj())
        diag_sum += pops
        diag_sumsq += pops**2
        max_res = max(max_res, traj.max_inv_residual)
        if psi_block is not None:
            psi_block[offset] = traj.psi
        if index < N_DETAIL_TRAJECTORIES:
            detail.append((index, traj))
    return {
        "start": start, "p_rows": p_rows, "rho_sum": rho_sum,
        "diag_sum": diag_sum, "diag_sumsq": diag_sumsq,
        "failures": failures, "detail": detail, "psi": psi_block,
        "max_res": max_res,
    }


def run_ensemble(model: ModelSpec, psi0, cfg: EnsembleConfig,
                 out_dir=None) -> EnsembleResult:
    """Run the ensemble; optionally stream outputs to ``out_dir``.

    Aborted trajectories are excluded from the reduction and counted;
    more than 5% of them is an error.  Results are independent of the
    worker count.
    """
    t0 = time.perf_counter()
    psi0 = np.asarray(psi0, dtype=np.complex128)
    if cfg.method == "mqsd" and model.channels:
        common_memory_time(model)  # validate early: mqsd needs a shared tau
    record_every = int(round(cfg.sample_every / cfg.dt))
    n_steps = int(round(cfg.t_max / cfg.dt))
    n_t = n_steps // record_every + 1
    d = model.dim

    blocks = [(model, psi0, cfg, start, min(start + cfg.block_size, cfg.n_traj), n_t)
              for start in range(0, cfg.n_traj, cfg.block_size)]

    p_table = np.full((cfg.n_traj, n_t), np.nan)
    rho_sum = np.zeros((n_t, d, d), dtype=np.complex128)
    diag_sum = np.zeros((n_t, d))
    diag_sumsq = np.zeros((n_t, d))
    psi_all = np.full((cfg.n_traj, n_t, d), np.nan, dtype=np.complex128) if cfg.keep_psi else None
    failures = []
    detail = []
    max_res = 0.0

    ptable_stream = None
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        ptable_stream = open(os.path.join(out_dir, "ptable.csv"), "w", encoding="utf-8")
        ptable_stream.write("# one row per trajectory, columns follow the t grid in rho.csv\n")

    def reduce_block(res):
        nonlocal rho_sum, diag_sum, diag_sumsq, max_res
        start = res["start"]
        stop = start + res["p_rows"].shape[0]
        p_table[start:stop] = res["p_rows"]
        rho_sum += res["rho_sum"]
        diag_sum += res["diag_sum"]
        diag_sumsq += res["diag_sumsq"]
        failures.extend(res["failures"])
        detail.extend(res["detail"])
        max_res = max(max_res, res["max_res"])
        if psi_all is not None:
            psi_all[start:stop] = res["psi"]
        if ptable_stream is not None:
            # blocks reduce in index order, so this is an append-only write
            for row in res["p_rows"]:
                ptable_stream.write(",".join(_fmt(x) for x in row) + "\n")

    try:
        if cfg.workers == 1:
            for block in blocks:
                reduce_block(_run_block(block))
        else:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                pending = {}
                next_block = 0
                futures = {pool.submit(_run_block, block): i
                           for i, block in enumerate(blocks)}
                from concurrent.futures import as_completed
                for fut in as_completed(futures):
                    pending[futures[fut]] = fut.result()
                    while next_block in pending:
                        reduce_block(pending.pop(next_block))
                        next_block += 1
    finally:
        if ptable_stream is not None:
            ptable_stream.close()

    n_ok = cfg.n_traj - len(failures)
    if n_ok == 0 or len(failures) > MAX_FAILURE_FRACTION * cfg.n_traj:
        raise EnsembleFailure(
            f"{len(failures)}/{cfg.n_traj} trajectories aborted "
            f"(cap {MAX_FAILURE_FRACTION:.0%}); first: {failures[0][1]}")

    rho = rho_sum / n_ok
    mean = diag_sum / n_ok
    var = np.maximum(diag_sumsq / n_ok - mean**2, 0.0)
    stderr = np.sqrt(var / max(n_ok - 1, 1))

    result = EnsembleResult(
        t=np.arange(n_t) * (record_every * cfg.dt),
        rho=rho, diag_stderr=stderr, p_table=p_table,
        n_failed=len(failures), failures=tuple(sorted(failures)), config=cfg,
        model_label=model.label, wall_time=time.perf_counter() - t0,
        psi=psi_all, detail=tuple(sorted(detail, key=lambda pair: pair[0])),
        max_inv_residual=max_res,
    )
    if out_dir is not None:
        write_run_outputs(result, out_dir, model, skip_ptable=True)
    return result


def signal_matrix(result: EnsembleResult) -> np.ndarray:
    """Bright-manifold signal samples, surviving trajectories only."""
    return result.p_table[result.ok_mask]


# ---------------------------------------------------------------------------
# run directory outputs
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_run_outputs(result: EnsembleResult, out_dir, model: ModelSpec,
                      skip_ptable: bool = False) -> None:
    """Write manifest.json, rho.csv, ptable.csv and per-trajectory detail CSVs.

    ``run_ensemble`` streams ptable.csv incrementally while reducing and
    passes ``skip_ptable=True`` here for the remaining files.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    d = model.dim

    manifest = {
        "version": __version__,
        "model": model.label,
        "model_params": {k: v for k, v in model.params.items()},
        "bright_states": list(model.bright_states),
        "config": asdict(result.config),
        "n_failed": result.n_failed,
        "failures": [[i, msg] for i, msg in result.failures],
        "wall_time_s": result.wall_time,
        "max_inv_residual": result.max_inv_residual,
        "n_samples": int(result.t.size),
        "t_grid": {"start": 0.0, "step": float(result.t[1] - result.t[0]) if result.t.size > 1 else 0.0,
                   "count": int(result.t.size)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    with open(os.path.join(out_dir, "rho.csv"), "w", encoding="utf-8") as fh:
        cols = ["t"]
        cols += [f"{p}_rho_{i}_{j}" for i in range(d) for j in range(d) for p in ("re", "im")]
        cols += [f"stderr_rho_{i}_{i}" for i in range(d)]
        fh.write(",".join(cols) + "\n")
        for n, t in enumerate(result.t):
            row = [_fmt(t)]
            for i in range(d):
                for j in range(d):
                    row.append(_fmt(result.rho[n, i, j].real))
                    row.append(_fmt(result.rho[n, i, j].imag))
            row += [_fmt(result.diag_stderr[n, i]) for i in range(d)]
            fh.write(",".join(row) + "\n")

    if not skip_ptable:
        with open(os.path.join(out_dir, "ptable.csv"), "w", encoding="utf-8") as fh:
            fh.write("# one row per trajectory, columns follow the t grid in rho.csv\n")
            for row in result.p_table:
                fh.write(",".join(_fmt(x) for x in row) + "\n")

    for index, traj in result.detail:
        path = os.path.join(out_dir, f"traj_{index:03d}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,P,norm,inv_residual,re_C,im_C\n")
            for n in range(traj.t.size):
                fh.write(",".join([
                    _fmt(traj.t[n]), _fmt(traj.p[n]), _fmt(traj.state_norm[n]),
                    _fmt(traj.inv_residual[n]),
                    _fmt(traj.counterterm[n].real), _fmt(traj.counterterm[n].imag),
                ]) + "\n")
