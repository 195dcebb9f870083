import numpy as np
import pytest

from slpkit import precoding as pc
from slpkit import robust as rb
from slpkit.channel import (
    effective_gram_stack,
    make_aging_model,
    sample_rayleigh,
)
from slpkit.modulation import build_constellation, cir_coefficients, symbols_from_indices
from slpkit.network import PerturbationNet

QPSK = build_constellation("psk", 4)


def make_case(rng, k=3, n_tx=3, n_sym=4, alpha=0.95, fine_factor=2):
    h0 = sample_rayleigh(k, n_tx, rng)
    aging = make_aging_model(h0, np.float64(alpha), rng, fine_factor=fine_factor,
                             n_symbols=n_sym)
    s_idx = rng.integers(0, 4, size=(k, n_sym))
    hbar = aging.alpha.T[:, :, None] * h0[None]
    e_stack = effective_gram_stack(aging)
    return aging, s_idx, hbar, e_stack


class TestPrecoderMatrix:
    def test_no_aging_equals_mmse_precoder(self):
        # push-through identity: (H^H H + cI)^{-1} H^H = H^H (H H^H + cI)^{-1}
        rng = np.random.default_rng(0)
        h = sample_rayleigh(3, 4, rng)
        e_stack = np.zeros((3, 4, 4), dtype=complex)
        sigma2, p_t = 0.2, 1.5
        p_mat = rb.precoder_matrix(h, np.ones(3), np.zeros(3), e_stack, sigma2, p_t)
        expected = h.conj().T @ pc.upsilon_mmse(h, sigma2, p_t)
        np.testing.assert_allclose(p_mat, expected, atol=1e-10)

    def test_scaled_psi_recomputation(self):
        # recomputation oracle: build the closed form directly at c*psi
        rng = np.random.default_rng(1)
        h = sample_rayleigh(2, 3, rng)
        e_stack = np.zeros((2, 3, 3), dtype=complex)
        c = 1.7
        psi = c * np.ones(2)
        sigma2, p_t = 0.1, 1.0
        p_mat = rb.precoder_matrix(h, psi, np.zeros(2), e_stack, sigma2, p_t)
        a = (h.conj().T * psi**2) @ h + (sigma2 * np.sum(psi**2) / p_t) * np.eye(3)
        expected = np.linalg.solve(a, h.conj().T * psi[None, :])
        np.testing.assert_allclose(p_mat, expected, atol=1e-10)

    def test_scalar_closed_form(self):
        h = np.array([[2.0 + 0j]])
        e = np.zeros((1, 1, 1), dtype=complex)
        p = rb.precoder_matrix(h, np.array([3.0]), np.array([0.0]), e, 0.5, 2.0)
        # (|h|^2 psi^2 + sigma^2 psi^2 / P_T)^{-1} h* psi
        expected = (2.0 * 3.0) / (4.0 * 9.0 + 0.5 * 9.0 / 2.0)
        assert p[0, 0] == pytest.approx(expected)


class TestUpsilonRobust:
    def test_zero_psi_identity(self):
        rng = np.random.default_rng(2)
        h = sample_rayleigh(3, 3, rng)
        p_mat = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        np.testing.assert_allclose(
            rb.upsilon_robust(np.zeros(3), h, p_mat), np.eye(3)
        )

    def test_perfect_csi_zero_noise_limit(self):
        rng = np.random.default_rng(3)
        h = sample_rayleigh(3, 3, rng)
        e_stack = np.zeros((3, 3, 3), dtype=complex)
        p_mat = rb.precoder_matrix(h, np.ones(3), np.zeros(3), e_stack, 0.0, 1.0)
        ups = rb.upsilon_robust(np.ones(3), h, p_mat)
        assert np.max(np.abs(ups)) < 1e-8

    def test_hermitian_positive_definite(self):
        rng = np.random.default_rng(4)
        aging, s_idx, hbar, e_stack = make_case(rng)
        psi = np.abs(rng.standard_normal(3)) + 0.5
        p_mat = rb.precoder_matrix(hbar[0], psi, aging.beta[:, 0], e_stack, 0.05, 1.0)
        ups = rb.upsilon_robust(psi, hbar[0], p_mat)
        np.testing.assert_allclose(ups, ups.conj().T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(ups) > 0)


class TestOracle:
    def test_monotone_and_terminates(self):
        rng = np.random.default_rng(5)
        aging, s_idx, hbar, e_stack = make_case(rng)
        res = rb.rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, QPSK, 1.0, 0.01)
        assert res.converged.all()
        for trace in res.traces:
            assert len(trace) <= 400
            diffs = np.diff(trace)
            assert np.all(diffs <= 1e-12)

    def test_alpha_one_single_pass_reduces_to_cimmse(self):
        rng = np.random.default_rng(6)
        k = n_tx = 3
        h0 = sample_rayleigh(k, n_tx, rng)
        aging = make_aging_model(h0, np.float64(1.0), rng, n_symbols=4)
        s_idx = rng.integers(0, 4, size=(k, 4))
        hbar = aging.alpha.T[:, :, None] * h0[None]
        e_stack = effective_gram_stack(aging)
        sigma2 = 0.05
        res = rb.rcimmse_oracle(
            hbar, e_stack, aging.beta, s_idx, QPSK, 1.0, sigma2,
            max_iter=1, freeze_psi=True,
        )
        block, _, _ = pc.cimmse_optimal(h0, s_idx, QPSK, 1.0, sigma2)
        x_per_symbol = block.x * (block.gamma / block.gamma_bar)[None, :]
        assert np.max(np.abs(res.x - x_per_symbol)) < 1e-6

    def test_symmetric_users_equal_gamma(self):
        # symmetry probe: orthonormal equal-norm rows, no aging
        rng = np.random.default_rng(7)
        q, _ = np.linalg.qr(sample_rayleigh(3, 3, rng).T)
        h0 = q.T
        aging = make_aging_model(h0, np.float64(1.0), rng, n_symbols=2)
        s_idx = rng.integers(0, 4, size=(3, 2))
        hbar = aging.alpha.T[:, :, None] * h0[None]
        e_stack = effective_gram_stack(aging)
        res = rb.rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, QPSK, 1.0, 0.01)
        gamma = res.eta[None, :] / res.psi
        spread = np.max(gamma, axis=0) - np.min(gamma, axis=0)
        assert np.all(spread < 1e-6)

    def test_transmit_power(self):
        rng = np.random.default_rng(8)
        aging, s_idx, hbar, e_stack = make_case(rng)
        p_t = 2.0
        res = rb.rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, QPSK, p_t, 0.05)
        np.testing.assert_allclose(np.sum(np.abs(res.x) ** 2, axis=0), p_t, atol=1e-9)

    def test_oracle_beats_nonrobust_mse(self):
        rng = np.random.default_rng(9)
        aging, s_idx, hbar, e_stack = make_case(rng, alpha=0.9)
        sigma2 = 1e-3
        res = rb.rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, QPSK, 1.0, sigma2)
        gamma = res.eta[None, :] / res.psi
        mse_rob = rb.robust_mse(res.x, gamma, res.s_tilde, hbar, e_stack, aging.beta, sigma2)
        block, _, st = pc.cimmse_optimal(aging.h0, s_idx, QPSK, 1.0, sigma2)
        mse_non = rb.robust_mse(block.x, block.gamma_bar, st, hbar, e_stack, aging.beta, sigma2)
        assert mse_rob < mse_non


class TestScalingInputs:
    def test_shape_and_constant_channel(self):
        rng = np.random.default_rng(10)
        aging, s_idx, _, _ = make_case(rng)
        s_c = symbols_from_indices(QPSK, s_idx)
        x = rb.build_scaling_inputs(aging.h0, aging.m, aging.v_t, aging.alpha, s_c, 0.3)
        assert x.shape == (3, 3, 4, 8)
        np.testing.assert_array_equal(x[..., 7], 0.3)

    def test_antenna_permutation_moves_axis_2_only(self):
        rng = np.random.default_rng(11)
        aging, s_idx, _, _ = make_case(rng)
        s_c = symbols_from_indices(QPSK, s_idx)
        x0 = rb.build_scaling_inputs(aging.h0, aging.m, aging.v_t, aging.alpha, s_c, 0.3)
        perm = rng.permutation(3)
        # permuting antennas permutes h columns and v_t rows coherently
        x1 = rb.build_scaling_inputs(
            aging.h0[:, perm], aging.m, aging.v_t[perm], aging.alpha, s_c, 0.3
        )
        np.testing.assert_allclose(x1, x0[:, perm])


class TestLearnedPipeline:
    def test_injection_identity(self):
        rng = np.random.default_rng(12)
        aging, s_idx, hbar, e_stack = make_case(rng)
        sigma2 = 0.02
        res = rb.rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, QPSK, 1.0, sigma2)
        x, eta, st, psi, gamma = rb.rcimmse_dl(
            aging, s_idx, QPSK, 1.0, sigma2, None, None,
            psi_override=res.psi, d_override=res.d,
        )
        np.testing.assert_allclose(x, res.x, atol=1e-9)
        np.testing.assert_allclose(eta, res.eta, atol=1e-9)

    def test_zeroed_perturbation_head_is_robust_linear(self):
        rng = np.random.default_rng(13)
        aging, s_idx, hbar, e_stack = make_case(rng)
        sigma2 = 0.02
        net_b = PerturbationNet(width=4, depth=1, seed=13).eval_mode()
        net_b.out.weight.data[:] = 0.0
        net_b.out.bias.data[:] = 0.0
        psi = np.abs(rng.standard_normal((3, 4))) + 0.5
        x, eta, st, _, _ = rb.rcimmse_dl(
            aging, s_idx, QPSK, 1.0, sigma2, None, net_b, psi_override=psi
        )
        s_c = symbols_from_indices(QPSK, s_idx)
        np.testing.assert_allclose(st, s_c)
        cir = cir_coefficients(QPSK, s_idx)
        x_ref, _, _ = rb.robust_precode(
            hbar, e_stack, aging.beta, s_c, cir, psi, np.zeros((3, 4, 2)), 1.0, sigma2
        )
        np.testing.assert_allclose(x, x_ref, atol=1e-12)

    def test_scaling_net_positivity_and_shape(self):
        from slpkit.robust import ScalingNet

        rng = np.random.default_rng(14)
        aging, s_idx, _, _ = make_case(rng)
        s_c = symbols_from_indices(QPSK, s_idx)
        xin = rb.build_scaling_inputs(aging.h0, aging.m, aging.v_t, aging.alpha, s_c, 0.1)
        net = ScalingNet(width=8, depth3d=1, depth2d=1, seed=14).eval_mode()
        psi = net.predict(xin)
        assert psi.shape == (3, 4)
        assert np.all(psi > 0)


def test_robust_mse_matches_monte_carlo():
    # simulate the analytic expectation directly
    rng = np.random.default_rng(15)
    aging, s_idx, hbar, e_stack = make_case(rng, alpha=0.9)
    sigma2 = 0.05
    res = rb.rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, QPSK, 1.0, sigma2)
    gamma = res.eta[None, :] / res.psi
    analytic = rb.robust_mse(res.x, gamma, res.s_tilde, hbar, e_stack, aging.beta, sigma2)
    from slpkit.channel import sample_aged_channel

    total = 0.0
    n = 4000
    k, n_sym = s_idx.shape
    for _ in range(n):
        for l in range(n_sym):
            h = sample_aged_channel(aging, l + 1, rng)
            noise = (rng.standard_normal(k) + 1j * rng.standard_normal(k)) / np.sqrt(2) * np.sqrt(sigma2)
            y = h @ res.x[:, l] + noise
            total += np.sum(np.abs(y / gamma[:, l] - res.s_tilde[:, l]) ** 2)
    mc = total / (n * n_sym * k)
    assert abs(mc / analytic - 1) < 0.05
