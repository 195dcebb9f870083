"""Robust MMSE symbol-level precoding under channel aging.

The exact solver alternates three exact partial minimizations of the block
mean square error (transmit vector, per-user scaling, perturbation factors);
the learned pipeline replaces the iterations with two networks: one for the
auxiliary scaling variables, one for the perturbation factors.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnls
from .autodiff import Linear, Module, Tensor
from .channel import effective_gram_stack
from .equivariant import AttentionPool, EquivariantAttentionBlock
from .errors import ShapeMismatch
from .linalg import cholesky_upper, frobenius_normalize, hermitian_inverse, real_composite
from .modulation import cir_coefficients, symbols_from_indices
from .precoding import kkt_features


def precoder_matrix(hbar, psi, beta, e_stack, sigma2, p_t):
    """Closed-form robust precoding matrix for one symbol slot.

    P = (Hbar^H Psi^2 Hbar + sum_k psi_k^2 beta_k^2 E_k
         + sigma^2 sum_k psi_k^2 / P_T I)^{-1} Hbar^H Psi.
    """
    psi2 = psi**2
    phi = np.einsum("k,kij->ij", psi2 * beta**2, e_stack)
    gram = (hbar.conj().T * psi2[None, :]) @ hbar
    reg = sigma2 * np.sum(psi2) / p_t
    a = gram + phi + reg * np.eye(hbar.shape[1])
    return hermitian_inverse(a) @ (hbar.conj().T * psi[None, :])


def upsilon_robust(psi, hbar, p_mat):
    """Residual-error kernel I - Psi Hbar P of the robust objective."""
    k = hbar.shape[0]
    return np.eye(k) - psi[:, None] * (hbar @ p_mat)


def _lambda_single(mu, nu):
    k = mu.shape[0]
    lam = np.zeros((2 * k, 2 * k))
    idx = np.arange(k)
    lam[idx, idx] = mu.real
    lam[idx, k + idx] = nu.real
    lam[k + idx, idx] = mu.imag
    lam[k + idx, k + idx] = nu.imag
    return lam


def _shape_symbols_nnls(upsilon, s, mu, nu, tol=nnls.DEFAULT_TOL):
    """Minimize (s + p)^H Upsilon (s + p) over CIR perturbations via NNLS."""
    c_u = cholesky_upper(real_composite(upsilon))
    lam = _lambda_single(mu, nu)
    s_r = np.concatenate([s.real, s.imag])
    sol = nnls.solve(c_u @ lam, c_u @ s_r, tol=tol)
    k = s.shape[0]
    d = np.stack([sol.delta[:k], sol.delta[k:]], axis=-1)
    return d, s + mu * d[:, 0] + nu * d[:, 1]


@dataclass
class RobustOracleResult:
    psi: np.ndarray  # (K, L)
    d: np.ndarray  # (K, L, 2)
    x: np.ndarray  # (N_T, L)
    eta: np.ndarray  # (L,)
    s_tilde: np.ndarray  # (K, L)
    traces: list  # per-symbol objective values, one list per symbol
    converged: np.ndarray  # (L,) bool


def _batched_upsilon(psi, hbar, p_mats):
    k = hbar.shape[1]
    hp = np.einsum("lkt,ltj->lkj", hbar, p_mats)
    return np.eye(k)[None] - psi.T[:, :, None] * hp


def _real_composite_stack(ups):
    """R(Upsilon[l]) for a stack: (L, K, K) complex -> (L, 2K, 2K) real."""
    n_sym, k = ups.shape[0], ups.shape[1]
    out = np.empty((n_sym, 2 * k, 2 * k))
    out[:, :k, :k] = ups.real
    out[:, :k, k:] = -ups.imag
    out[:, k:, :k] = ups.imag
    out[:, k:, k:] = ups.real
    return out


def rcimmse_oracle(
    hbar,
    e_stack,
    beta,
    s_idx,
    constellation,
    p_t,
    sigma2,
    tol_mse=1e-4,
    max_iter=400,
    freeze_psi=False,
):
    """Alternating exact minimization of the per-symbol robust MSE.

    hbar: (L, K, N_T) effective mean channels; e_stack: (K, N_T, N_T)
    innovation Gram matrices; beta: (K, L). Stops when the objective change
    drops below tol_mse or after max_iter iterations; the recorded per-symbol
    objective trace is non-increasing by construction. The per-symbol
    problems are independent; they are updated in lockstep (batched linear
    algebra) with converged symbols frozen at their final iterate.
    """
    s_c = symbols_from_indices(constellation, s_idx)
    cir = cir_coefficients(constellation, s_idx)
    k, n_sym = s_c.shape
    lam = cir.lambda_real()  # (L, 2K, 2K), fixed over iterations
    s_r = np.concatenate([s_c.real, s_c.imag], axis=0)  # (2K, L)
    be = np.einsum("kl,ktu->lktu", beta**2, e_stack)  # beta^2 E_k per symbol

    psi = np.ones((k, n_sym))
    s_tilde = s_c.copy()
    d = np.zeros((k, n_sym, 2))
    active = np.ones(n_sym, dtype=bool)
    traces = [[] for _ in range(n_sym)]
    prev_mse = np.full(n_sym, np.inf)
    converged = np.zeros(n_sym, dtype=bool)

    def precoders(cur_psi):
        psi2 = cur_psi**2
        gram = np.einsum("kl,lkt,lku->ltu", psi2, hbar.conj(), hbar)
        phi = np.einsum("kl,lktu->ltu", psi2, be)
        reg = sigma2 * np.sum(psi2, axis=0) / p_t
        a = gram + phi + reg[:, None, None] * np.eye(hbar.shape[2])[None]
        rhs = np.einsum("lkt,kl->ltk", hbar.conj(), cur_psi)
        return np.linalg.solve(a, rhs)

    for _ in range(max_iter):
        if not active.any():
            break
        p_mats = precoders(psi)
        x_raw = np.einsum("ltk,kl->lt", p_mats, s_tilde)
        eta = np.sqrt(p_t) / np.linalg.norm(x_raw, axis=1)
        x = eta[:, None] * x_raw
        if not freeze_psi:
            hx = np.einsum("lkt,lt->kl", hbar, x)
            quad = np.real(np.einsum("lt,lktu,lu->kl", x.conj(), be, x))
            denom = np.abs(hx) ** 2 + quad + sigma2
            inv_gamma = np.maximum(np.real(s_tilde.conj() * hx) / denom, 1e-9)
            psi_new = eta[None, :] * inv_gamma
            psi = np.where(active[None, :], psi_new, psi)
            p_mats = precoders(psi)
        ups = _batched_upsilon(psi, hbar, p_mats)
        c_low = np.linalg.cholesky(_real_composite_stack(ups))
        c_up = np.transpose(c_low, (0, 2, 1))
        a_stack = c_up @ lam
        b_stack = np.einsum("lmn,nl->lm", c_up, s_r)
        deltas, _, _ = nnls.solve_block(a_stack, b_stack)
        d_new = np.stack([deltas[:, :k].T, deltas[:, k:].T], axis=-1)
        d = np.where(active[None, :, None], d_new, d)
        s_tilde = np.where(
            active[None, :],
            s_c + cir.mu * d[..., 0] + cir.nu * d[..., 1],
            s_tilde,
        )
        mse = np.real(np.einsum("kl,lkj,jl->l", s_tilde.conj(), ups, s_tilde))
        for l in np.flatnonzero(active):
            traces[l].append(float(mse[l]))
        done = active & (np.abs(prev_mse - mse) < tol_mse)
        converged |= done
        prev_mse = np.where(active, mse, prev_mse)
        active &= ~done
    # final transmit vectors consistent with the last (psi, s_tilde)
    p_mats = precoders(psi)
    x_raw = np.einsum("ltk,kl->lt", p_mats, s_tilde)
    eta = np.sqrt(p_t) / np.linalg.norm(x_raw, axis=1)
    x = (eta[:, None] * x_raw).T
    return RobustOracleResult(
        psi=psi, d=d, x=x, eta=eta, s_tilde=s_tilde,
        traces=traces, converged=converged,
    )


def robust_precode(hbar, e_stack, beta, s_c, cir, psi, d, p_t, sigma2):
    """Closed-form transmit block from given scaling variables and factors.

    Shared by the exact oracle's output stage and the learned pipeline, so
    injecting oracle variables into the learned path reproduces the oracle.
    Returns (x (N_T, L), eta (L,), s_tilde (K, L)).
    """
    k, n_sym = s_c.shape
    s_tilde = s_c + cir.mu * d[..., 0] + cir.nu * d[..., 1]
    n_tx = hbar.shape[2]
    x = np.empty((n_tx, n_sym), dtype=np.complex128)
    eta = np.empty(n_sym)
    for l in range(n_sym):
        p_mat = precoder_matrix(hbar[l], psi[:, l], beta[:, l], e_stack, sigma2, p_t)
        x_raw = p_mat @ s_tilde[:, l]
        eta[l] = np.sqrt(p_t) / np.linalg.norm(x_raw)
        x[:, l] = eta[l] * x_raw
    return x, eta, s_tilde


def robust_mse(x, gamma, s_tilde, hbar, e_stack, beta, sigma2):
    """Analytic per-user-averaged MSE of a transmit block under aging.

    gamma: per-user scaling (K, L) or a scalar/1-D per-symbol factor shared
    by all users. Averages the exact expectation over users and symbols.
    """
    k, n_sym = s_tilde.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (k, n_sym))
    total = 0.0
    for l in range(n_sym):
        hx = hbar[l] @ x[:, l]
        quad = np.real(np.einsum("i,kij,j->k", x[:, l].conj(), e_stack, x[:, l]))
        noise = beta[:, l] ** 2 * quad + sigma2
        err = np.abs(hx / gamma[:, l] - s_tilde[:, l]) ** 2 + noise / gamma[:, l] ** 2
        total += float(np.sum(err))
    return total / (k * n_sym)


# ---------------------------------------------------------------------------
# Learned pipeline


def build_scaling_inputs(h, m, v_t, alpha, s_c, sigma2):
    """Replicated input tensor for the scaling network: (K, N_T, L, 8).

    Channel layout on the last axis: [Re H, Re U, Im H, Im U, Re S, Im S,
    alpha, sigma^2] with U = M V_T^H; the pilot-phase quantities replicate
    along symbols and the per-symbol quantities along antennas.
    """
    k, n_tx = h.shape
    n_sym = s_c.shape[1]
    if alpha.shape != (k, n_sym):
        raise ShapeMismatch("alpha must be (K, L)")
    u = m @ v_t.conj().T
    q = np.stack([h, u], axis=-1)  # (K, N_T, 2)
    q_rep = np.repeat(q[:, :, None, :], n_sym, axis=2)  # (K, N_T, L, 2)
    g = np.stack([s_c.real, s_c.imag, alpha], axis=-1)  # (K, L, 3)
    g_rep = np.repeat(g[:, None, :, :], n_tx, axis=1)  # (K, N_T, L, 3)
    const = np.full((k, n_tx, n_sym, 1), float(sigma2))
    return np.concatenate([q_rep.real, q_rep.imag, g_rep, const], axis=-1)


class ScalingNet(Module):
    """Predicts the positive per-user scaling variables of the robust solver.

    Embedding, a stack of 3-D equivariant attention blocks over (user,
    antenna, symbol), attention pooling over the antenna axis, a stack of 2-D
    blocks over (user, symbol), then a softplus head: output (B, K, L) > 0.
    """

    def __init__(self, width=16, depth3d=2, depth2d=2, n_heads=4, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        f = width
        self.embed = Linear(8, f, rng)
        self.blocks3d = [
            EquivariantAttentionBlock(3, f, fa_pool_axes=(1, 2), rng=rng)
            for _ in range(depth3d)
        ]
        self.pool = AttentionPool(f, axis=2, n_heads=n_heads, rng=rng)
        self.blocks2d = [
            EquivariantAttentionBlock(2, f, fa_pool_axes=(1, 2), rng=rng)
            for _ in range(depth2d)
        ]
        self.out = Linear(f, 1, rng)

    def forward(self, x):
        h = self.embed.forward(x)
        for block in self.blocks3d:
            h = block.forward(h)
        h = self.pool.forward(h)
        for block in self.blocks2d:
            h = block.forward(h)
        h = ad.softplus(self.out.forward(h))
        return ad.reshape(h, h.data.shape[:-1])

    def predict(self, x):
        single = x.ndim == 4
        if single:
            x = x[None]
        was_training = self.training
        self.train_mode(False)
        with ad.no_grad():
            psi = self.forward(Tensor(x)).data
        self.train_mode(was_training)
        return psi[0] if single else psi


def robust_features(hbar, e_stack, beta, psi, s_c, cir, sigma2, p_t):
    """Per-symbol KKT features from the robust residual kernel at given psi."""
    n_sym = s_c.shape[1]
    ups = np.empty((n_sym, s_c.shape[0], s_c.shape[0]), dtype=np.complex128)
    for l in range(n_sym):
        p_mat = precoder_matrix(hbar[l], psi[:, l], beta[:, l], e_stack, sigma2, p_t)
        ups[l] = upsilon_robust(psi[:, l], hbar[l], p_mat)
    return kkt_features(frobenius_normalize(ups), cir, s_c)


def rcimmse_dl(
    aging,
    s_idx,
    constellation,
    p_t,
    sigma2,
    scaling_net,
    perturbation_net,
    psi_override=None,
    d_override=None,
):
    """Two-stage learned robust precoder.

    Stage 1 predicts the scaling variables from channel/statistics/symbols;
    stage 2 builds the residual-kernel features at those variables and
    predicts the perturbation factors; the closed form yields the block.
    Overrides exist so oracle variables can be injected for verification.
    Returns (x, eta, s_tilde, psi, gamma) with gamma = eta / psi per user.
    """
    s_c = symbols_from_indices(constellation, s_idx)
    cir = cir_coefficients(constellation, s_idx)
    hbar = aging.alpha.T[:, :, None] * aging.h0[None, :, :]  # (L, K, N_T)
    e_stack = effective_gram_stack(aging)
    beta = aging.beta
    if psi_override is None:
        x_in = build_scaling_inputs(aging.h0, aging.m, aging.v_t, aging.alpha, s_c, sigma2)
        psi = scaling_net.predict(x_in)
    else:
        psi = np.asarray(psi_override, dtype=np.float64)
    if d_override is None:
        feats = robust_features(hbar, e_stack, beta, psi, s_c, cir, sigma2, p_t)
        d_hat = np.maximum(perturbation_net.predict(feats.bias, feats.coef), 0.0)
    else:
        d_hat = np.asarray(d_override, dtype=np.float64)
    x, eta, s_tilde = robust_precode(hbar, e_stack, beta, s_c, cir, psi, d_hat, p_t, sigma2)
    gamma = eta[None, :] / psi
    return x, eta, s_tilde, psi, gamma
