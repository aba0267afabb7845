import numpy as np
import pytest

from nmqsd.kernel import KernelTerm, MemoryKernel, memory_time, mg24_kernel
from nmqsd.models import (
    Mg24Params,
    build_dephasing,
    build_mg24,
    build_rabi,
    load_model,
    save_model,
)


def test_mg24_default_parameters():
    model = build_mg24()
    p = model.params
    assert p["rabi"] == 2.0
    assert p["zeeman"] == 12.1
    assert p["gamma"] == 1e-3
    assert p["tau"] == pytest.approx(508.6, abs=0.05)
    assert p["lambda_det"] == pytest.approx(9.755e-3, rel=1e-3)
    assert p["lambda_12"] == pytest.approx(1.4022e-3, rel=1e-4)
    assert p["rate_out_of_dark"] == pytest.approx(2.4285e-5, rel=1e-4)
    assert p["lambda_13"] == pytest.approx(2.1852e-4, rel=1e-4)
    assert p["rate_into_dark"] == pytest.approx(1.5178e-6, rel=1e-4)
    assert p["lambda_31"] == pytest.approx(5.4629e-5, rel=1e-4)


def test_mg24_rate_ratio_exact():
    for params in (Mg24Params(), Mg24Params(rabi=0.7, gamma=0.02, zeeman=3.0)):
        assert params.rate_out_of_dark / params.rate_into_dark == 16.0


def test_mg24_operator_structure():
    model = build_mg24()
    l1, l2, l3, l4 = (c.coupling for c in model.channels)
    # spontaneous emission projects onto the ground state
    prod = l1 @ l1.conj().T
    assert prod[0, 0] != 0
    assert np.max(np.abs(prod - np.diag([prod[0, 0], 0, 0]))) < 1e-20
    for l in (l1, l2, l3):
        assert np.linalg.matrix_rank(l) == 1
    assert np.max(np.abs(l4 - np.diag(np.diag(l4)))) == 0
    assert np.max(np.abs(model.hamiltonian - model.hamiltonian.conj().T)) == 0
    # all four channels share the packaged kernel
    assert all(c.minus_kernel == mg24_kernel() for c in model.channels)


def test_mg24_validation():
    with pytest.raises(ValueError):
        build_mg24(Mg24Params(tau=-1.0))
    with pytest.raises(ValueError):
        build_mg24(Mg24Params(gamma=0.0))
    with pytest.raises(ValueError):
        build_mg24(Mg24Params(zeeman=0.0))


def test_rabi_model():
    model = build_rabi(2.0)
    w = np.linalg.eigvalsh(model.hamiltonian)
    assert np.allclose(w, [-1.0, 1.0])
    assert build_rabi(0.0).hamiltonian.max() == 0
    assert model.channels == ()


def test_dephasing_model():
    kern = mg24_kernel()
    model = build_dephasing(1.5, kern)
    l = model.channels[0].coupling
    assert np.array_equal(l, l.conj().T)
    assert build_dephasing(0.0, kern).hamiltonian.max() == 0


def test_dephasing_populations_conserved_in_ensemble():
    # [H, L] = 0 keeps the mean populations fixed
    from nmqsd.ensemble import EnsembleConfig, run_ensemble
    from nmqsd.linalg import basis_state

    kern = MemoryKernel((KernelTerm(0.05, 0.4, 0.3),))
    model = build_dephasing(1.0, kern)
    psi0 = (basis_state(2, 0) + basis_state(2, 1)) / np.sqrt(2)
    cfg = EnsembleConfig(n_traj=200, t_max=6.0, dt=0.01, sample_every=1.0,
                         method="nmqsd", seed=5)
    res = run_ensemble(model, psi0, cfg)
    dev = np.abs(res.rho[:, 0, 0].real - 0.5)
    assert np.all(dev < 3.0 * np.maximum(res.diag_stderr[:, 0], 1e-4))


def test_config_round_trip_all_presets(tmp_path):
    models = [build_mg24(), build_rabi(1.3),
              build_dephasing(0.8, mg24_kernel())]
    for i, model in enumerate(models):
        path = tmp_path / f"model_{i}.cfg"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.label == model.label
        assert loaded.dim == model.dim
        assert np.array_equal(loaded.hamiltonian, model.hamiltonian)
        assert len(loaded.channels) == len(model.channels)
        for a, b in zip(loaded.channels, model.channels):
            assert np.array_equal(a.coupling, b.coupling)
            assert a.minus_kernel == b.minus_kernel
        assert loaded.params == model.params


def test_config_kernel_override(tmp_path):
    kern = MemoryKernel((KernelTerm(1.0, 0.2, 0.1),))
    path = tmp_path / "custom.cfg"
    path.write_text(
        "model = mg24\n"
        "rabi = 1.5\n"
        "kernel_term = 1.0 0.2 0.1\n")
    model = load_model(path)
    assert model.params["rabi"] == 1.5
    assert model.channels[0].minus_kernel == kern
    assert model.params["tau"] == pytest.approx(memory_time(kern))


def test_config_parse_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model = mg24\nnot a config line\n")
    with pytest.raises(ValueError, match=r":2:"):
        load_model(bad)
    unknown = tmp_path / "unk.cfg"
    unknown.write_text("model = mg24\nbogus_key = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        load_model(unknown)
    nomodel = tmp_path / "nomodel.cfg"
    nomodel.write_text("rabi = 1\n")
    with pytest.raises(ValueError, match="unknown model"):
        load_model(nomodel)
