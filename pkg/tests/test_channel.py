import numpy as np

from slpkit.channel import (
    build_partial_dft,
    effective_gram_stack,
    effective_matrices,
    jakes_autocorrelation,
    make_aging_model,
    sample_aged_channel,
    sample_rayleigh,
    sample_spectral_profile,
)


class TestRayleigh:
    def test_energy_normalization(self):
        # Monte-Carlo moment check: E tr(H H^H) = K * N_T
        rng = np.random.default_rng(0)
        total = 0.0
        n = 10_000
        for _ in range(n):
            h = sample_rayleigh(2, 3, rng)
            total += np.sum(np.abs(h) ** 2)
        assert abs(total / (n * 6) - 1.0) < 0.02

    def test_determinism(self):
        h1 = sample_rayleigh(3, 4, np.random.default_rng(42))
        h2 = sample_rayleigh(3, 4, np.random.default_rng(42))
        np.testing.assert_array_equal(h1, h2)

    def test_scalar_moment(self):
        rng = np.random.default_rng(1)
        vals = [abs(sample_rayleigh(1, 1, rng)[0, 0]) ** 2 for _ in range(10_000)]
        assert abs(np.mean(vals) - 1.0) < 0.05


class TestPartialDft:
    def test_unitary_rows(self):
        v = build_partial_dft(4, 1)
        np.testing.assert_allclose(v @ v.conj().T, np.eye(4), atol=1e-12)

    def test_two_by_two(self):
        v = build_partial_dft(2, 1)
        np.testing.assert_allclose(v, np.array([[1, 1], [1, -1]]) / np.sqrt(2), atol=1e-12)

    def test_oversampled_row_norms(self):
        v = build_partial_dft(3, 2)
        assert v.shape == (3, 6)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)


class TestAgedChannel:
    def test_alpha_one_identity(self):
        rng = np.random.default_rng(2)
        h0 = sample_rayleigh(2, 4, rng)
        model = make_aging_model(h0, np.float64(1.0), rng, n_symbols=3)
        got = sample_aged_channel(model, 2, rng)
        np.testing.assert_allclose(got, h0, atol=1e-12)

    def test_alpha_zero_covariance(self):
        # oracle: sample covariance of rows vs conj(V_T) V_T^T = I at N_F=1
        rng = np.random.default_rng(3)
        h0 = sample_rayleigh(1, 3, rng)
        model = make_aging_model(h0, np.float64(0.0), rng, n_symbols=1)
        model.m[:] = 1.0
        cov = np.zeros((3, 3), dtype=complex)
        n = 20_000
        for _ in range(n):
            h = sample_aged_channel(model, 1, rng)
            cov += np.outer(h[0], h[0].conj())
        cov /= n
        expected = model.v_t.conj() @ model.v_t.T
        assert np.max(np.abs(cov - expected)) < 0.05

    def test_determinism(self):
        rng = np.random.default_rng(4)
        h0 = sample_rayleigh(2, 3, rng)
        model = make_aging_model(h0, np.float64(0.9), rng, n_symbols=2)
        a = sample_aged_channel(model, 1, np.random.default_rng(7))
        b = sample_aged_channel(model, 1, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_energy_preserved_under_full_aging(self):
        rng = np.random.default_rng(5)
        h0 = sample_rayleigh(1, 4, rng)
        model = make_aging_model(h0, np.float64(0.0), rng, fine_factor=2, n_symbols=1)
        total = 0.0
        n = 5000
        for _ in range(n):
            total += np.sum(np.abs(sample_aged_channel(model, 1, rng)) ** 2)
        assert abs(total / (n * 4) - 1.0) < 0.1


class TestEffectiveMatrices:
    def test_all_ones_profile(self):
        v_t = build_partial_dft(3, 1)
        _, e = effective_matrices(np.ones(3), v_t)
        np.testing.assert_allclose(e, np.eye(3), atol=1e-12)

    def test_zero_profile(self):
        v_t = build_partial_dft(3, 2)
        v_k, e = effective_matrices(np.zeros(6), v_t)
        assert not v_k.any() and not e.any()

    def test_quadratic_identity(self):
        rng = np.random.default_rng(6)
        v_t = build_partial_dft(4, 2)
        m = sample_spectral_profile(4, 2, rng)
        v_k, e = effective_matrices(m, v_t)
        for _ in range(10):
            x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
            np.testing.assert_allclose(
                np.real(x.conj() @ e @ x), np.linalg.norm(v_k @ x) ** 2, atol=1e-12
            )

    def test_effective_noise_variance(self):
        # Monte-Carlo: Var(innovation^T x) matches beta^2 ||V_k x||^2 + sigma^2
        rng = np.random.default_rng(7)
        h0 = sample_rayleigh(1, 3, rng)
        alpha = 0.9
        model = make_aging_model(h0, np.float64(alpha), rng, fine_factor=2, n_symbols=1)
        e = effective_gram_stack(model)[0]
        x = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        sigma2 = 0.1
        beta2 = 1 - alpha**2
        samples = []
        for _ in range(20_000):
            h = sample_aged_channel(model, 1, rng)
            noise = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2) * np.sqrt(sigma2)
            samples.append((h[0] - alpha * h0[0]) @ x + noise)
        got = np.var(samples)
        want = beta2 * np.real(x.conj() @ e @ x) + sigma2
        assert abs(got / want - 1.0) < 0.05


def test_spectral_profile_scaling():
    rng = np.random.default_rng(8)
    m = sample_spectral_profile(4, 2, rng, density=0.25)
    assert m.shape == (8,)
    assert np.all(m >= 0)
    assert np.isclose(np.sum(m**2), 8.0)
    assert np.count_nonzero(m) == 2


def test_jakes_autocorrelation_values():
    # J0(0) = 1; first zero near x = 2.4048
    assert np.isclose(jakes_autocorrelation(0.0, 1), 1.0)
    x0 = 2.404825557695773 / (2 * np.pi)
    assert abs(jakes_autocorrelation(x0, 1.0)) < 1e-6
    # decreasing near zero
    vals = jakes_autocorrelation(0.01, np.arange(10))
    assert np.all(np.diff(vals) < 0)
