"""Exact symbol-level precoders, KKT feature tensors, and linear baselines.

The two exact schemes share one pattern: per transmit symbol, a nonnegative
least squares problem shapes the symbols deeper into their constructive
interference regions, then a closed form recovers the transmit vector and its
receiver scaling factor. Block power reallocation equalizes the scaling over
the whole block.
"""

from dataclasses import dataclass

import numpy as np

from . import nnls
from .errors import NnlsFailure, NonPositiveGamma, ShapeMismatch
from .linalg import (
    cholesky_upper,
    frobenius_normalize,
    hermitian_inverse,
    pseudo_inverse_fat,
    real_composite,
)
from .modulation import cir_coefficients, symbols_from_indices


@dataclass
class PrecodedBlock:
    """Reallocated transmit block: x[:, l] carries symbol l."""

    x: np.ndarray  # (N_T, L) complex, after block power reallocation
    gamma: np.ndarray  # (L,) per-symbol scaling before reallocation
    gamma_bar: float  # uniform block scaling factor


@dataclass
class KktFeatures:
    """Bias/coefficient tensors of the per-symbol optimality conditions."""

    bias_c: np.ndarray  # (K, L, 2) complex
    coef_c: np.ndarray  # (K, K, L, 4) complex
    bias: np.ndarray  # (K, L, 4) real: [Re, Im] split on the last axis
    coef: np.ndarray  # (K, K, L, 8) real


def upsilon_zf(h):
    """(H H^H)^{-1}, the quadratic-form kernel of the zero-forcing family."""
    h = np.asarray(h, dtype=np.complex128)
    return hermitian_inverse(h @ h.conj().T)


def upsilon_mmse(h, sigma2, p_t):
    """(H H^H + sigma^2 K / P_T I)^{-1}; equals upsilon_zf at sigma2 = 0."""
    h = np.asarray(h, dtype=np.complex128)
    k = h.shape[0]
    return hermitian_inverse(h @ h.conj().T + (sigma2 * k / p_t) * np.eye(k))


def block_power_realloc(gamma, x):
    """Equalize the scaling factor over a block at constant total energy.

    gamma_bar = sqrt(L / sum(1/gamma^2)) and x_bar[l] = gamma_bar/gamma[l] x[l],
    which preserves sum_l ||x_bar[l]||^2 = sum_l ||x[l]||^2.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise NonPositiveGamma("per-symbol scaling factors must be positive")
    gamma_bar = float(np.sqrt(len(gamma) / np.sum(1.0 / gamma**2)))
    return gamma_bar, np.asarray(x) * (gamma_bar / gamma)[None, :]


def kkt_features(upsilon, cir, s_c):
    """Assemble the bias/coefficient tensors feeding the learned solver.

    upsilon: (K, K) or (L, K, K), expected Frobenius-normalized by the caller.
    cir: CirCoefficients for the block; s_c: (K, L) complex symbols.
    """
    s_c = np.asarray(s_c)
    k, n_sym = s_c.shape
    if cir.mu.shape != (k, n_sym):
        raise ShapeMismatch("CIR coefficients do not match the symbol block")
    ups = np.asarray(upsilon, dtype=np.complex128)
    if ups.ndim == 2:
        ups = np.broadcast_to(ups, (n_sym, k, k))
    elif ups.shape != (n_sym, k, k):
        raise ShapeMismatch(f"upsilon stack {ups.shape} vs L={n_sym}, K={k}")
    us = np.einsum("lkj,jl->kl", ups, s_c)  # Upsilon[l] s_c[l]
    mu_c, nu_c = cir.mu.conj(), cir.nu.conj()
    bias_c = np.stack([mu_c * us, nu_c * us], axis=-1)
    # coef slices: conj(d_k) Upsilon[l]_{kj} e_j for d, e in {mu, nu}
    umu = np.einsum("lkj,jl->kjl", ups, cir.mu)
    unu = np.einsum("lkj,jl->kjl", ups, cir.nu)
    coef_c = np.stack(
        [
            mu_c[:, None, :] * umu,
            mu_c[:, None, :] * unu,
            nu_c[:, None, :] * umu,
            nu_c[:, None, :] * unu,
        ],
        axis=-1,
    )
    bias = np.concatenate([bias_c.real, bias_c.imag], axis=-1)
    coef = np.concatenate([coef_c.real, coef_c.imag], axis=-1)
    return KktFeatures(bias_c=bias_c, coef_c=coef_c, bias=bias, coef=coef)


def _nnls_block(a_base, lam, s_r, tol=nnls.DEFAULT_TOL):
    """Per-symbol NNLS solves for A = a_base Lambda[l], b = a_base s_r[:, l]."""
    a_stack = np.einsum("mk,lkn->lmn", a_base, lam)
    b_stack = (a_base @ s_r).T
    deltas, _, optimal = nnls.solve_block(a_stack, b_stack, tol=tol)
    if not np.all(optimal):
        raise NnlsFailure("active-set solver hit its iteration limit")
    return deltas, a_stack, b_stack


def _perturb(s_c, cir, d):
    """Apply perturbation factors: s + mu*d_mu + nu*d_nu columnwise."""
    return s_c + cir.mu * d[..., 0] + cir.nu * d[..., 1]


def _recover(p_mat, s_tilde, p_t):
    """Closed-form transmit block from a precoding matrix and shaped symbols."""
    x = p_mat @ s_tilde
    norms = np.linalg.norm(x, axis=0)
    gamma = np.sqrt(p_t) / norms
    return x * gamma[None, :], gamma


def cizf_optimal(h, s_idx, constellation, p_t, tol=nnls.DEFAULT_TOL):
    """Exact interference-shaping zero-forcing precoder for one block.

    Returns (PrecodedBlock, D, s_tilde) where D (K, L, 2) stacks the optimal
    nonnegative perturbation factors and s_tilde the shaped symbols.
    """
    h = np.asarray(h, dtype=np.complex128)
    s_c = symbols_from_indices(constellation, s_idx)
    cir = cir_coefficients(constellation, s_idx)
    h_dag = pseudo_inverse_fat(h)
    ups_scale = np.linalg.norm(upsilon_zf(h))
    a_base = real_composite(h_dag) / np.sqrt(ups_scale)
    s_r = np.concatenate([s_c.real, s_c.imag], axis=0)
    deltas, _, _ = _nnls_block(a_base, cir.lambda_real(), s_r, tol)
    k = h.shape[0]
    d = np.stack([deltas[:, :k].T, deltas[:, k:].T], axis=-1)
    s_tilde = _perturb(s_c, cir, d)
    x, gamma = _recover(h_dag, s_tilde, p_t)
    gamma_bar, x_bar = block_power_realloc(gamma, x)
    return PrecodedBlock(x=x_bar, gamma=gamma, gamma_bar=gamma_bar), d, s_tilde


def cimmse_optimal(h, s_idx, constellation, p_t, sigma2, tol=nnls.DEFAULT_TOL):
    """Exact interference-shaping MMSE precoder for one block."""
    h = np.asarray(h, dtype=np.complex128)
    k = h.shape[0]
    s_c = symbols_from_indices(constellation, s_idx)
    cir = cir_coefficients(constellation, s_idx)
    ups = upsilon_mmse(h, sigma2, p_t)
    h_r = real_composite(h)
    gram = h_r @ h_r.T + (sigma2 * k / p_t) * np.eye(2 * k)
    c_u = cholesky_upper(hermitian_inverse(gram))
    a_base = c_u / np.sqrt(np.linalg.norm(ups))
    s_r = np.concatenate([s_c.real, s_c.imag], axis=0)
    deltas, _, _ = _nnls_block(a_base, cir.lambda_real(), s_r, tol)
    d = np.stack([deltas[:, :k].T, deltas[:, k:].T], axis=-1)
    s_tilde = _perturb(s_c, cir, d)
    x, gamma = _recover(h.conj().T @ ups, s_tilde, p_t)
    gamma_bar, x_bar = block_power_realloc(gamma, x)
    return PrecodedBlock(x=x_bar, gamma=gamma, gamma_bar=gamma_bar), d, s_tilde


def post_refine(upsilon, s_c, cir, d_hat):
    """Scale predicted perturbations by the optimal nonnegative factor.

    Minimizes the per-symbol quadratic (s + rho p)^H Upsilon (s + rho p) over
    rho >= 0 with p = mu*d_mu + nu*d_nu; returns (rho (L,), s_tilde (K, L)).
    """
    s_c = np.asarray(s_c)
    n_sym = s_c.shape[1]
    ups = np.asarray(upsilon, dtype=np.complex128)
    if ups.ndim == 2:
        ups = np.broadcast_to(ups, (n_sym, s_c.shape[0], s_c.shape[0]))
    p = cir.mu * d_hat[..., 0] + cir.nu * d_hat[..., 1]
    up = np.einsum("lkj,jl->kl", ups, p)
    num = 2.0 * np.real(np.einsum("kl,kl->l", s_c.conj(), up))
    den = 2.0 * np.real(np.einsum("kl,kl->l", p.conj(), up))
    rho = np.zeros(n_sym)
    nz = den > 0
    rho[nz] = np.maximum(0.0, -num[nz] / den[nz])
    return rho, s_c + rho[None, :] * p


def lp_zf(h, s_idx, constellation, p_t):
    """Zero-forcing baseline with per-symbol power use and block reallocation."""
    h = np.asarray(h, dtype=np.complex128)
    s_c = symbols_from_indices(constellation, s_idx)
    x, gamma = _recover(pseudo_inverse_fat(h), s_c, p_t)
    gamma_bar, x_bar = block_power_realloc(gamma, x)
    return PrecodedBlock(x=x_bar, gamma=gamma, gamma_bar=gamma_bar)


def lp_mmse(h, s_idx, constellation, p_t, sigma2):
    """Regularized linear baseline x = gamma H^H Upsilon_mmse s."""
    h = np.asarray(h, dtype=np.complex128)
    s_c = symbols_from_indices(constellation, s_idx)
    x, gamma = _recover(h.conj().T @ upsilon_mmse(h, sigma2, p_t), s_c, p_t)
    gamma_bar, x_bar = block_power_realloc(gamma, x)
    return PrecodedBlock(x=x_bar, gamma=gamma, gamma_bar=gamma_bar)
