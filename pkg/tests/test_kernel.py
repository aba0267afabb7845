import numpy as np
import pytest
from scipy.integrate import quad

from nmqsd.kernel import (
    KernelFitError,
    KernelTerm,
    MemoryKernel,
    ModeBath,
    fit_kernel,
    load_kernel,
    memory_time,
    mg24_kernel,
    mode_kernel_thermal,
    mode_kernel_zero_t,
    mode_kernels_pm,
    save_kernel,
)

TABLE_AMPLITUDE_SUM = 35.744819


def quad_memory_time(kernel):
    """Independent quadrature oracle for the memory-time closed form."""
    gmin = min(t.decay for t in kernel.terms if t.decay > 0)
    val, _ = quad(lambda t: kernel.eval(t, 0.0).real, 0.0, 50.0 / gmin, limit=500)
    return val


def test_eval_constant_term():
    k = MemoryKernel((KernelTerm(1.0, 0.0, 0.0),))
    for t, s in ((0.0, 0.0), (3.0, 1.0), (10.0, -4.0)):
        assert k.eval(t, s) == pytest.approx(1.0)


def test_eval_equal_times_is_amplitude_sum():
    k = mg24_kernel()
    assert k.eval(7.3, 7.3) == pytest.approx(TABLE_AMPLITUDE_SUM, abs=1e-6)


def test_eval_hermitian_symmetry():
    k = mg24_kernel()
    rng = np.random.default_rng(0)
    t, s = rng.uniform(-50, 50, size=(2, 1000))
    assert np.allclose(k.eval(s, t), np.conj(k.eval(t, s)), atol=1e-12)


def test_memory_time_of_table():
    assert memory_time(mg24_kernel()) == pytest.approx(508.6, abs=0.05)


def test_memory_time_unit_exponential():
    assert memory_time(MemoryKernel((KernelTerm(1.0, 1.0, 0.0),))) == pytest.approx(1.0)


def test_memory_time_matches_quadrature():
    k = mg24_kernel()
    assert memory_time(k) == pytest.approx(quad_memory_time(k), rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_memory_time_quadrature_random_kernels(seed):
    rng = np.random.default_rng(400 + seed)
    terms = tuple(
        KernelTerm(rng.uniform(0.1, 5.0), rng.uniform(0.05, 2.0), rng.uniform(-1.0, 1.0))
        for _ in range(3))
    k = MemoryKernel(terms)
    assert memory_time(k) == pytest.approx(quad_memory_time(k), rel=1e-6)


def test_memory_time_divergent_term_rejected():
    with pytest.raises(ValueError):
        memory_time(MemoryKernel((KernelTerm(1.0, 0.0, 0.0),)))


def test_memory_time_pure_oscillation_contributes_zero():
    k = MemoryKernel((KernelTerm(2.0, 0.0, 1.5), KernelTerm(1.0, 1.0, 0.0)))
    assert memory_time(k) == pytest.approx(1.0)


def test_kernel_term_validation():
    with pytest.raises(ValueError):
        KernelTerm(-1.0, 0.1, 0.0)
    with pytest.raises(ValueError):
        KernelTerm(1.0, -0.1, 0.0)
    with pytest.raises(ValueError):
        KernelTerm(np.inf, 0.1, 0.0)


def test_mode_kernel_zero_t_single_mode():
    bath = ModeBath(modes=((1.0, 0.0),))
    k = mode_kernel_zero_t(bath)
    assert k.eval(5.0, 2.0) == pytest.approx(1.0)


def test_mode_kernel_zero_t_two_modes_direct_sum():
    bath = ModeBath(modes=((0.3, 1.2), (0.7, 0.4)))
    k = mode_kernel_zero_t(bath)
    for t in (0.0, 1.7, 6.2):
        direct = sum(g * g * np.exp(-1j * w * t) for g, w in bath.modes)
        assert k.eval(t, 0.0) == pytest.approx(direct, abs=1e-15)
    assert k.eval(0.0, 0.0) == pytest.approx(sum(g * g for g, _ in bath.modes))


def test_mode_kernel_thermal_zero_t_limit():
    bath0 = ModeBath(modes=((0.5, 1.0), (0.2, 2.0)))
    cold = ModeBath(modes=bath0.modes, temperature=1e-8)
    k0 = mode_kernel_zero_t(bath0)
    kc = mode_kernel_thermal(cold)
    for t in (0.0, 0.9, 3.3):
        assert kc.eval(t, 0.0) == pytest.approx(k0.eval(t, 0.0), abs=1e-12)


def test_mode_kernel_thermal_im_part_temperature_independent():
    modes = ((0.5, 1.0), (0.2, 2.0))
    k_hot = mode_kernel_thermal(ModeBath(modes=modes, temperature=5.0))
    k_cool = mode_kernel_thermal(ModeBath(modes=modes, temperature=0.1))
    for t in (0.4, 1.1, 2.6):
        assert k_hot.eval(t, 0.0).imag == pytest.approx(k_cool.eval(t, 0.0).imag, abs=1e-10)


def test_mode_kernel_thermal_high_t_classical_limit():
    # coth(w/2T) -> 2T/w at kT = 100 * w
    g, w = 0.3, 1.0
    temp = 100.0 * w
    k = mode_kernel_thermal(ModeBath(modes=((g, w),), temperature=temp))
    assert k.eval(0.0, 0.0).real == pytest.approx(2.0 * temp / w * g * g, rel=1e-3)


def test_mode_kernel_thermal_needs_positive_frequencies():
    with pytest.raises(ValueError):
        ModeBath(modes=((0.5, 0.0),), temperature=1.0)


def test_mode_kernels_pm_zero_temperature():
    minus, plus = mode_kernels_pm(ModeBath(modes=((0.4, 1.0),)))
    assert plus.eval(1.0, 0.0) == 0.0
    assert minus.eval(1.0, 0.0) == pytest.approx(0.16 * np.exp(-1j * 1.0))


def test_mode_kernels_pm_weight_ratio():
    g, w_freq = 0.5, 1.0
    temp = w_freq / np.log(2.0)          # Boltzmann weight exactly 1/2
    minus, plus = mode_kernels_pm(ModeBath(modes=((g, w_freq),), temperature=temp))
    assert plus.eval(0.0, 0.0).real / minus.eval(0.0, 0.0).real == pytest.approx(0.5)


def test_mode_kernels_pm_hermitian_symmetry():
    _, plus = mode_kernels_pm(ModeBath(modes=((0.5, 1.0), (0.3, 0.7)),
                                       temperature=2.0))
    rng = np.random.default_rng(7)
    for _ in range(20):
        t, s = rng.uniform(-3, 3, size=2)
        assert plus.eval(s, t) == pytest.approx(np.conj(plus.eval(t, s)), abs=1e-12)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def synth_samples(kernel, t_max=60.0, n=240):
    t = np.linspace(0.0, t_max, n)
    return t, np.array([kernel.eval(x, 0.0) for x in t])


def test_fit_single_term_recovery():
    truth = MemoryKernel((KernelTerm(2.0, 0.1, 0.5),))
    t, vals = synth_samples(truth)
    fitted, report = fit_kernel(t, vals, m=1)
    assert report.rms < 1e-8
    term = fitted.terms[0]
    assert term.amplitude == pytest.approx(2.0, rel=1e-6)
    assert term.decay == pytest.approx(0.1, rel=1e-6)
    assert term.frequency == pytest.approx(0.5, rel=1e-6)


def test_fit_table_fixed_point():
    truth = mg24_kernel()
    t, vals = synth_samples(truth, t_max=400.0, n=400)
    fitted, report = fit_kernel(t, vals, m=5, init=truth)
    assert report.rms < 1e-10


def test_fit_nested_models_residual_ordering():
    truth = MemoryKernel((KernelTerm(2.0, 0.1, 0.3), KernelTerm(1.0, 0.5, -0.8)))
    t, vals = synth_samples(truth, t_max=40.0, n=200)
    _, rep1 = fit_kernel(t, vals, m=1)
    _, rep2 = fit_kernel(t, vals, m=2, init=truth)
    assert rep2.rms < rep1.rms


@pytest.mark.parametrize("seed", range(3))
def test_fit_converges_from_perturbed_init(seed):
    rng = np.random.default_rng(500 + seed)
    truth = MemoryKernel((KernelTerm(2.0, 0.2, 0.4), KernelTerm(0.8, 0.05, -0.3)))
    t, vals = synth_samples(truth, t_max=80.0, n=320)
    init = [KernelTerm(term.amplitude * rng.uniform(0.9, 1.1),
                       term.decay * rng.uniform(0.9, 1.1),
                       term.frequency * rng.uniform(0.9, 1.1))
            for term in truth.terms]
    _, report = fit_kernel(t, vals, m=2, init=init)
    assert report.rms < 1e-8


def test_fit_requires_enough_samples():
    with pytest.raises(ValueError):
        fit_kernel([0.0, 1.0, 2.0], [1.0, 0.5, 0.2], m=1)


def test_fit_failure_carries_best_so_far():
    # one damped GN iteration cannot reach the optimum from a cold start
    truth = MemoryKernel((KernelTerm(2.0, 0.1, 0.5), KernelTerm(1.0, 0.7, -1.2)))
    t, vals = synth_samples(truth, t_max=50.0, n=200)
    with pytest.raises(KernelFitError) as err:
        fit_kernel(t, vals, m=2, max_iter=1)
    assert err.value.best.n_terms == 2
    assert err.value.rms > 0


# ---------------------------------------------------------------------------
# kernel files
# ---------------------------------------------------------------------------

def test_kernel_file_round_trip(tmp_path):
    k = mg24_kernel()
    path = tmp_path / "kernel.txt"
    save_kernel(k, path)
    assert load_kernel(path) == k


def test_kernel_file_parse_error_has_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1.0 0.1 0.0\n2.0 garbage\n")
    with pytest.raises(ValueError, match=r":2:"):
        load_kernel(path)


def test_packaged_table_digits():
    k = mg24_kernel()
    assert k.n_terms == 5
    assert k.terms[0] == KernelTerm(2.46740754, 0.00437729384, -0.0934233663)
    assert k.terms[2].amplitude == 10.0
    assert k.terms[4] == KernelTerm(8.16208273, 0.0269287619, 0.0599005113)


def test_repo_data_file_matches_package():
    import os
    repo_file = os.path.join(os.path.dirname(__file__), "..", "data", "mg24_kernel")
    assert load_kernel(repo_file) == mg24_kernel()
