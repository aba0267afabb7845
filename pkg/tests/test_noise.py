import numpy as np
import pytest

from nmqsd.kernel import KernelTerm, MemoryKernel, mg24_kernel
from nmqsd.noise import (
    NoiseChannel,
    TrajectoryNoise,
    complex_wiener_increment,
    estimate_covariance,
    standard_complex_normals,
    trajectory_rng,
)

TABLE_AMPLITUDE_SUM = 35.744819


def test_wiener_increment_moments():
    rng = trajectory_rng(0, 0)
    dt = 0.37
    n = 100_000
    draws = np.array([complex_wiener_increment(rng, dt) for _ in range(n)])
    se_component = np.sqrt(dt / 2.0 / n)
    assert abs(draws.mean().real) < 5 * se_component
    assert abs(draws.mean().imag) < 5 * se_component
    # M[dW dW] = 0
    sq = draws * draws
    assert abs(sq.mean()) < 5 * np.hypot(sq.real.std(), sq.imag.std()) / np.sqrt(n)
    # M[|dW|^2] = dt
    mag = np.abs(draws) ** 2 / dt
    assert mag.mean() == pytest.approx(1.0, abs=5 * mag.std() / np.sqrt(n))


def test_wiener_increment_requires_positive_dt():
    with pytest.raises(ValueError):
        complex_wiener_increment(trajectory_rng(0, 0), 0.0)


def test_stationary_variance_and_circularity():
    rng = trajectory_rng(1, 0)
    kernel = MemoryKernel((KernelTerm(1.0, 0.3, 0.2),))
    n = 100_000
    xi = np.sqrt(1.0) * standard_complex_normals(rng, (n,))
    mag = np.abs(xi) ** 2
    assert mag.mean() == pytest.approx(1.0, abs=5 * mag.std() / np.sqrt(n))
    corr = np.corrcoef(xi.real, xi.imag)[0, 1]
    assert abs(corr) < 5 / np.sqrt(n)
    chan = NoiseChannel.stationary(kernel, trajectory_rng(1, 1))
    assert np.abs(chan.z) > 0


def test_stationary_zero_amplitude_is_exact_zero():
    kernel = MemoryKernel((KernelTerm(0.0, 0.3, 0.2),))
    chan = NoiseChannel.stationary(kernel, trajectory_rng(2, 0))
    assert chan.z == 0.0


def test_gamma_zero_update_preserves_amplitude():
    kernel = MemoryKernel((KernelTerm(1.0, 0.0, 0.7),))
    chan = NoiseChannel.stationary(kernel, trajectory_rng(3, 0))
    before = chan.xi[0]
    chan.advance(0.9, trajectory_rng(3, 1))
    # default convention rotates opposite to the literal generator equation
    assert chan.xi[0] == pytest.approx(before * np.exp(+1j * 0.7 * 0.9))
    assert abs(chan.xi[0]) == pytest.approx(abs(before))


def test_one_step_conditional_moments():
    a, g, w = 2.0, 0.4, 0.9
    kernel = MemoryKernel((KernelTerm(a, g, w),))
    dt = 0.63
    n = 100_000
    rng = trajectory_rng(4, 0)
    xi0 = 1.3 - 0.4j
    finals = np.empty(n, dtype=complex)
    chan = NoiseChannel(kernel=kernel)
    for i in range(n):
        chan.xi = np.array([xi0])
        chan.advance(dt, rng)
        finals[i] = chan.xi[0]
    decay = np.exp(-(g - 1j * w) * dt)
    var = a * (1.0 - np.exp(-2.0 * g * dt))
    dev = finals - decay * xi0
    assert abs(dev.mean()) < 5 * np.sqrt(var / n)
    mag = np.abs(dev) ** 2
    assert mag.mean() == pytest.approx(var, abs=5 * mag.std() / np.sqrt(n))


def test_large_step_reaches_stationary_distribution():
    a, g, w = 1.7, 0.05, 0.3
    kernel = MemoryKernel((KernelTerm(a, g, w),))
    rng = trajectory_rng(5, 0)
    n = 10_000
    finals = np.empty(n, dtype=complex)
    chan = NoiseChannel(kernel=kernel)
    for i in range(n):
        chan.xi = np.array([50.0 + 0.0j])   # far from stationarity
        chan.advance(400.0 / g, rng)
        finals[i] = chan.xi[0]
    mag = np.abs(finals) ** 2
    assert mag.mean() == pytest.approx(a, abs=5 * mag.std() / np.sqrt(n))
    sq = finals * finals
    assert abs(sq.mean()) < 5 * np.hypot(sq.real.std(), sq.imag.std()) / np.sqrt(n)


def test_distinct_streams_are_uncorrelated():
    kernel = MemoryKernel((KernelTerm(1.0, 0.2, 0.0),))
    n = 10_000
    z1 = np.empty(n, dtype=complex)
    z2 = np.empty(n, dtype=complex)
    for i in range(n):
        z1[i] = NoiseChannel.stationary(kernel, trajectory_rng(6, 2 * i)).z
        z2[i] = NoiseChannel.stationary(kernel, trajectory_rng(6, 2 * i + 1)).z
    cross = z1 * np.conj(z2)
    se = np.hypot(cross.real.std(), cross.imag.std()) / np.sqrt(n)
    assert abs(cross.mean()) < 5 * se


def test_z_value_sums_terms():
    kernel = MemoryKernel((KernelTerm(1.0, 0.2, 0.0), KernelTerm(2.0, 0.1, 0.4)))
    chan = NoiseChannel.stationary(kernel, trajectory_rng(7, 0))
    assert chan.z == pytest.approx(chan.xi.sum())
    single = NoiseChannel.stationary(MemoryKernel((KernelTerm(1.5, 0.2, 0.1),)),
                                     trajectory_rng(7, 1))
    assert single.z == pytest.approx(single.xi[0])


def test_table_stationary_variance():
    est = estimate_covariance(mg24_kernel(), [0.0], n_paths=10_000, master_seed=8)
    se = est.combined_stderr_covariance()[0]
    assert abs(est.covariance[0] - TABLE_AMPLITUDE_SUM) < 5 * se


def test_covariance_matches_kernel_at_lags():
    kernel = mg24_kernel()
    est = estimate_covariance(kernel, [0.0, 10.0, 50.0, 100.0], n_paths=10_000,
                              master_seed=9)
    dev = np.abs(est.covariance - est.kernel_values)
    assert np.all(dev < 5 * est.combined_stderr_covariance())
    assert np.all(np.abs(est.pseudo) < 5 * est.combined_stderr_pseudo())


def test_covariance_literal_convention_is_conjugate():
    kernel = MemoryKernel((KernelTerm(2.0, 0.05, 0.8),))
    est = estimate_covariance(kernel, [0.0, 5.0, 15.0], n_paths=20_000,
                              master_seed=10, omega_sign=+1)
    expected = np.conj(est.kernel_values)
    dev = np.abs(est.covariance - expected)
    assert np.all(dev < 5 * est.combined_stderr_covariance())


def test_trajectory_rng_validation_and_determinism():
    with pytest.raises(ValueError):
        trajectory_rng(-1, 0)
    a = trajectory_rng(11, 3).standard_normal(8)
    b = trajectory_rng(11, 3).standard_normal(8)
    assert np.array_equal(a, b)
    c = trajectory_rng(11, 4).standard_normal(8)
    assert not np.array_equal(a, c)


def test_trajectory_noise_matches_channelwise_draws():
    """Flattened aggregate consumes the stream exactly like per-channel draws."""
    k1 = MemoryKernel((KernelTerm(1.0, 0.2, 0.3), KernelTerm(0.5, 0.1, -0.2)))
    k2 = MemoryKernel((KernelTerm(2.0, 0.4, 0.0),))
    agg = TrajectoryNoise([k1, k2], [None, None])
    rng = trajectory_rng(12, 0)
    agg.init_stationary(rng)
    agg.advance(0.25, rng)
    agg.advance(0.25, rng)

    rng2 = trajectory_rng(12, 0)
    eta0 = standard_complex_normals(rng2, (3,))
    amps = np.array([1.0, 0.5, 2.0])
    xi = np.sqrt(amps) * eta0
    for _ in range(2):
        decay = np.exp(-(np.array([0.2, 0.1, 0.4]) + 1j * (-1) * np.array([0.3, -0.2, 0.0])) * 0.25)
        sigma = np.sqrt(amps * (1.0 - np.exp(-2.0 * np.array([0.2, 0.1, 0.4]) * 0.25)))
        xi = decay * xi + sigma * standard_complex_normals(rng2, (3,))
    assert np.allclose(agg.xi, xi, atol=1e-15)
    z_minus, z_plus = agg.z_values()
    assert z_minus[0] == pytest.approx(xi[0] + xi[1])
    assert z_minus[1] == pytest.approx(xi[2])
    assert np.all(z_plus == 0)
