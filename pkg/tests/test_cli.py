import json
import os

import numpy as np
import pytest

from nmqsd.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


def test_version_and_help():
    assert run_cli("--version") == 0


def test_kernel_tau_packaged_table(capsys):
    repo_kernel = os.path.join(os.path.dirname(__file__), "..", "data", "mg24_kernel")
    assert run_cli("kernel", "tau", repo_kernel) == 0
    out = capsys.readouterr().out.strip()
    assert float(out) == pytest.approx(508.6, abs=0.05)


def test_kernel_tau_alias(capsys):
    assert run_cli("kernel", "tau", "mg24") == 0
    assert float(capsys.readouterr().out.strip()) == pytest.approx(508.6, abs=0.05)


def test_kernel_tau_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad_kernel"
    bad.write_text("1.0 0.1\n")
    assert run_cli("kernel", "tau", bad) == 2
    assert ":1:" in capsys.readouterr().err


def test_kernel_fit_self_generated(tmp_path, capsys):
    from nmqsd.kernel import KernelTerm, MemoryKernel

    kern = MemoryKernel((KernelTerm(2.0, 0.1, 0.5),))
    t = np.linspace(0.0, 50.0, 200)
    vals = np.array([kern.eval(x, 0.0) for x in t])
    samples = tmp_path / "samples.csv"
    np.savetxt(samples, np.column_stack([t, vals.real, vals.imag]), delimiter=",")
    assert run_cli("kernel", "fit", samples, "-m", 1) == 0
    out = capsys.readouterr().out
    assert "rms residual" in out
    fitted = [float(x) for x in out.strip().splitlines()[-1].split()]
    assert fitted[0] == pytest.approx(2.0, rel=1e-5)


def test_kernel_check_and_alias(capsys):
    assert run_cli("kernel", "check", "mg24", "--paths", 3000,
                   "--lags", 0, 10, "--seed", 4) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "lag,re_alpha,im_alpha,re_cov,im_cov,stderr_re,stderr_im"
    row = [float(x) for x in out[1].split(",")]
    assert abs(row[3] - row[1]) < 5 * np.hypot(row[5], row[6])

    assert run_cli("noise-check", "mg24", "--paths", 2000, "--lags", 0) == 0
    out2 = capsys.readouterr().out.splitlines()
    assert out2[0] == out[0]


def simulate_args(out_dir, **kw):
    args = ["simulate", "--model", "mg24", "--method", "nmqsd",
            "--ntraj", 4, "--tmax", 40, "--sample-every", 2,
            "--seed", 5, "--out", out_dir]
    for key, value in kw.items():
        args += [f"--{key}", value]
    return args


def test_simulate_deterministic(tmp_path):
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    assert run_cli(*simulate_args(d1)) == 0
    assert run_cli(*simulate_args(d2)) == 0
    assert (d1 / "ptable.csv").read_bytes() == (d2 / "ptable.csv").read_bytes()


def test_simulate_methods_share_schema(tmp_path):
    d1, d2 = tmp_path / "nm", tmp_path / "m"
    assert run_cli(*simulate_args(d1)) == 0
    assert run_cli(*simulate_args(d2, method="mqsd")) == 0
    assert sorted(os.listdir(d1)) == sorted(os.listdir(d2))
    h1 = (d1 / "rho.csv").read_text().splitlines()[0]
    h2 = (d2 / "rho.csv").read_text().splitlines()[0]
    assert h1 == h2
    t1 = (d1 / "traj_000.csv").read_text().splitlines()[0]
    assert t1 == (d2 / "traj_000.csv").read_text().splitlines()[0]


def test_simulate_validation_error(tmp_path):
    assert run_cli("simulate", "--model", "mg24", "--ntraj", 0,
                   "--tmax", 10, "--out", tmp_path / "x") == 2
    assert run_cli("simulate", "--model", "nope", "--ntraj", 1,
                   "--tmax", 10, "--out", tmp_path / "y") == 2


def test_simulate_numerical_failure_exit_code(tmp_path):
    # driven-ion trajectories exceed the conditioning budget on long runs
    code = run_cli("simulate", "--model", "mg24", "--ntraj", 2,
                   "--tmax", 5000, "--dt", 0.05, "--sample-every", 100,
                   "--seed", 0, "--out", tmp_path / "fail")
    assert code == 3


def synthetic_run_dir(tmp_path, ratio=16.0, n_rows=200, n_cols=600):
    """Signal table drawn from a known two-component density.

    The components are members of the fitted lineshape family, with the
    bright-to-dark area ratio fixed by construction, so the analyze
    pipeline has an exact target.
    """
    from nmqsd.analysis import lineshape_components

    params = {
        "h1": 1.0, "h2": 1.0, "h3": 0.25, "h4": 0.0,
        "w1": 0.04, "w2": 0.05, "w3": 0.06, "w4": 0.07,
        "w5": 0.15, "w6": 0.18, "w7": 0.05, "w8": 0.05,
        "P1": 0.1, "P2": 0.9,
    }
    grid = np.linspace(0.0, 1.0, 4001)
    chi1, chi2, _ = lineshape_components("nonmarkov", params, grid)
    a1 = np.trapezoid(chi1, grid)
    a2 = np.trapezoid(chi2, grid)
    pdf = ratio / (1.0 + ratio) * chi2 / a2 + 1.0 / (1.0 + ratio) * chi1 / a1
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1])
                                           * np.diff(grid))])
    cdf /= cdf[-1]
    rng = np.random.default_rng(0)
    p = np.interp(rng.uniform(size=(n_rows, n_cols)), cdf, grid)
    out = tmp_path / "run"
    os.makedirs(out)
    manifest = {
        "version": "test", "model": "synthetic", "model_params": {},
        "bright_states": [0, 1],
        "config": {"seed": 0, "n_traj": int(p.shape[0])},
        "n_failed": 0, "failures": [], "wall_time_s": 0.0,
        "max_inv_residual": 0.0, "n_samples": int(n_cols),
        "t_grid": {"start": 0.0, "step": 1.0, "count": n_cols},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh)
    with open(out / "ptable.csv", "w") as fh:
        for row in p:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
    return out


def test_analyze_constructed_ratio(tmp_path, capsys):
    run_dir = synthetic_run_dir(tmp_path)
    assert run_cli("analyze", run_dir, "--delta-p", 0.01,
                   "--window", 0, 600) == 0
    with open(run_dir / "fit.json") as fh:
        record = json.load(fh)
    assert record["variant"] == "nonmarkov"
    # mass ratio is 16 by construction; the fitted decomposition has to
    # land close even though the shapes are not exactly in the family
    assert record["ratio"] == pytest.approx(16.0, rel=0.15)
    assert (run_dir / "chi.csv").exists()
    chi = np.loadtxt(run_dir / "chi.csv", delimiter=",", skiprows=1)
    width = chi[1, 0] - chi[0, 0]
    assert np.sum(chi[:, 1]) * width == pytest.approx(1.0, abs=1e-9)


def test_analyze_markov_variant_and_idempotence(tmp_path):
    run_dir = synthetic_run_dir(tmp_path)
    assert run_cli("analyze", run_dir, "--variant", "markov",
                   "--window", 0, 600) == 0
    first = (run_dir / "fit.json").read_bytes()
    with open(run_dir / "fit.json") as fh:
        assert json.load(fh)["variant"] == "markov"
    assert run_cli("analyze", run_dir, "--variant", "markov",
                   "--window", 0, 600) == 0
    assert (run_dir / "fit.json").read_bytes() == first


def test_analyze_missing_ptable(tmp_path):
    empty = tmp_path / "empty"
    os.makedirs(empty)
    assert run_cli("analyze", empty) == 4


def test_oracle_compare_runs(capsys):
    assert run_cli("oracle-compare", "--coupling", "decay",
                   "--modes", "0.2:1.0", "--ntraj", 60, "--tmax", 2,
                   "--dt", 0.01, "--nmax", 3) == 0
    out = capsys.readouterr().out
    assert out.startswith("entry,max_abs_dev,max_sigma_units")
    assert "worst deviation" in out
