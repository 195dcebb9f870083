"""Networks mapping optimality-condition features to perturbation factors,
the supervised training loop, and the learned block precoder pipeline."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, BatchNorm, Linear, Module, PRelu, Tensor
from .equivariant import EquivariantAttentionBlock, EquivariantDense, PairReduceDense
from .errors import EmptyDataset
from .linalg import frobenius_normalize, pseudo_inverse_fat
from .modulation import cir_coefficients, symbols_from_indices
from .precoding import (
    PrecodedBlock,
    block_power_realloc,
    kkt_features,
    post_refine,
    upsilon_mmse,
    upsilon_zf,
)


class PerturbationNet(Module):
    """Predicts nonnegative perturbation factors from KKT feature tensors.

    Inputs: coefficient tensor (B, K, K, L, 8) and bias tensor (B, K, L, 4);
    output (B, K, L, 2). Equivariant to user and symbol permutations by
    construction, and evaluable at any (K, L) with the same parameters.

    The output layer starts at zero (the zero-perturbation predictor) and
    carries a fixed gain so the optimizer can reach the large factors that
    poorly conditioned channels require.
    """

    def __init__(self, width=4, depth=4, seed=0, out_gain=8.0):
        super().__init__()
        rng = np.random.default_rng(seed)
        f = width
        self.pair_reduce = PairReduceDense(8, f, rng)
        self.bn_c1 = BatchNorm(f)
        self.fc_c = Linear(f, f, rng)
        self.bn_c2 = BatchNorm(f)
        self.act_c = PRelu()
        self.dense_b = EquivariantDense(2, 4, f, rng)
        self.bn_b = BatchNorm(f)
        self.act_b = PRelu()
        self.merge = Linear(2 * f, f, rng)
        self.blocks = [
            EquivariantAttentionBlock(2, f, fa_pool_axes=(1, 2), rng=rng)
            for _ in range(depth)
        ]
        self.out = Linear(f, 2, rng)
        self.out.weight.data[:] = 0.0
        self.out_gain = float(out_gain)

    def forward(self, bias, coef):
        c = ad.silu(self.bn_c1.forward(self.pair_reduce.forward(coef)))
        c = self.act_c.forward(self.bn_c2.forward(self.fc_c.forward(c)))
        b = self.act_b.forward(self.bn_b.forward(self.dense_b.forward(bias)))
        h = self.merge.forward(ad.concat([c, b], axis=-1))
        for block in self.blocks:
            h = block.forward(h)
        return ad.mul(self.out.forward(h), Tensor(self.out_gain))

    def predict(self, bias, coef):
        """Eval-mode forward on numpy arrays; adds/strips the batch axis."""
        single = bias.ndim == 3
        if single:
            bias, coef = bias[None], coef[None]
        was_training = self.training
        self.train_mode(False)
        with ad.no_grad():
            d = self.forward(Tensor(bias), Tensor(coef)).data
        self.train_mode(was_training)
        return d[0] if single else d


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 400
    lr_first: float = 5e-3
    lr_second: float = 5e-4
    seed: int = 0
    log_path: str = None
    clip_norm: float = 0.0  # 0 disables gradient clipping


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, train_loss, test_loss, lr)

    @property
    def final_test_loss(self):
        return self.history[-1][2]


def _mse(pred, target):
    diff = ad.add(pred, ad.neg(target))
    return ad.mean(ad.mul(diff, diff), tuple(range(pred.data.ndim)), keepdims=False)


def fit(net, train_inputs, train_labels, test_inputs, test_labels, config):
    """Adam/MSE training with the two-stage learning-rate schedule.

    train_inputs: tuple of arrays with leading sample axis; labels likewise.
    Returns a TrainResult with one (epoch, train_loss, test_loss, lr) row per
    epoch; writes the same rows as CSV when config.log_path is set.
    """
    n = train_labels.shape[0]
    if n == 0:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), lr=config.lr_first)
    result = TrainResult()
    for epoch in range(config.epochs):
        opt.lr = config.lr_first if epoch < config.epochs // 2 else config.lr_second
        order = rng.permutation(n)
        net.train_mode(True)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            pred = net.forward(*[Tensor(arr[idx]) for arr in train_inputs])
            loss = _mse(pred, Tensor(train_labels[idx]))
            opt.zero_grad()
            loss.backward()
            if config.clip_norm:
                total = np.sqrt(sum(
                    float(np.sum(p.grad**2)) for p in opt.params if p.grad is not None
                ))
                if total > config.clip_norm:
                    scale = config.clip_norm / total
                    for p in opt.params:
                        if p.grad is not None:
                            p.grad *= scale
            opt.step()
            total += float(loss.data) * len(idx)
            seen += len(idx)
        test_loss = evaluate_loss(net, test_inputs, test_labels)
        result.history.append((epoch, total / seen, test_loss, opt.lr))
    if config.log_path:
        with open(config.log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "test_loss", "lr"])
            writer.writerows(result.history)
    return result


def evaluate_loss(net, inputs, labels, batch_size=512):
    """Eval-mode MSE over a dataset, batched to bound memory."""
    was_training = net.training
    net.train_mode(False)
    total = 0.0
    n = labels.shape[0]
    with ad.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            pred = net.forward(*[Tensor(arr[sl]) for arr in inputs])
            total += float(np.sum((pred.data - labels[sl]) ** 2))
    net.train_mode(was_training)
    return total / labels.size


def zero_predictor_loss(labels):
    return float(np.mean(labels**2))


def block_features(h, s_idx, constellation, criterion, p_t, sigma2=None):
    """Feature tensors for one channel block under the chosen criterion."""
    ups = upsilon_zf(h) if criterion == "zf" else upsilon_mmse(h, sigma2, p_t)
    cir = cir_coefficients(constellation, s_idx)
    s_c = symbols_from_indices(constellation, s_idx)
    return kkt_features(frobenius_normalize(ups), cir, s_c), ups, cir, s_c


def learned_block_precode(
    h,
    s_idx,
    constellation,
    p_t,
    net,
    criterion="zf",
    sigma2=None,
    refine=True,
    d_override=None,
):
    """Closed-form precoding with net-predicted perturbation factors.

    Mirrors the exact solvers but replaces the per-symbol active-set solve
    with one network forward; optional scaling refinement never increases the
    shaping objective. Returns (PrecodedBlock, d_hat, s_tilde).
    """
    h = np.asarray(h, dtype=np.complex128)
    feats, ups, cir, s_c = block_features(h, s_idx, constellation, criterion, p_t, sigma2)
    if d_override is None:
        d_hat = np.maximum(net.predict(feats.bias, feats.coef), 0.0)
    else:
        d_hat = np.asarray(d_override, dtype=np.float64)
    if refine:
        _, s_tilde = post_refine(frobenius_normalize(ups), s_c, cir, d_hat)
    else:
        s_tilde = s_c + cir.mu * d_hat[..., 0] + cir.nu * d_hat[..., 1]
    p_mat = pseudo_inverse_fat(h) if criterion == "zf" else h.conj().T @ ups
    x = p_mat @ s_tilde
    gamma = np.sqrt(p_t) / np.linalg.norm(x, axis=0)
    gamma_bar, x_bar = block_power_realloc(gamma, x * gamma[None, :])
    return PrecodedBlock(x=x_bar, gamma=gamma, gamma_bar=gamma_bar), d_hat, s_tilde


def learned_precode_batch(channels, s_idx_batch, constellation, p_t, net,
                          criterion="zf", sigma2=None, refine=True, fast=None):
    """Batched inference over several channel blocks (one network forward).

    `fast` routes through the fused eval path (default: when available);
    it produces the same factors as the reference forward to roundoff.
    """
    from . import fastpath

    if fast is None:
        fast = fastpath.AVAILABLE
    ctx = []
    for h, s_idx in zip(channels, s_idx_batch):
        h = np.asarray(h, dtype=np.complex128)
        ups = upsilon_zf(h) if criterion == "zf" else upsilon_mmse(h, sigma2, p_t)
        cir = cir_coefficients(constellation, s_idx)
        s_c = symbols_from_indices(constellation, s_idx)
        ctx.append((h, ups, cir, s_c))
    if fast:
        was_training = net.training
        net.train_mode(False)
        compiled = fastpath.CompiledNet(net)
        net.train_mode(was_training)
        ups_n = np.stack([frobenius_normalize(c[1]) for c in ctx])
        mu = np.stack([c[2].mu for c in ctx])
        nu = np.stack([c[2].nu for c in ctx])
        s_all = np.stack([c[3] for c in ctx])
        d_all = np.maximum(fastpath.fast_predict(compiled, ups_n, mu, nu, s_all), 0.0)
    else:
        feats = [
            kkt_features(frobenius_normalize(ups), cir, s_c)
            for _, ups, cir, s_c in ctx
        ]
        bias = np.stack([f.bias for f in feats])
        coef = np.stack([f.coef for f in feats])
        d_all = np.maximum(net.predict(bias, coef), 0.0)
    outputs = []
    for d_hat, (h, ups, cir, s_c) in zip(d_all, ctx):
        if refine:
            _, s_tilde = post_refine(frobenius_normalize(ups), s_c, cir, d_hat)
        else:
            s_tilde = s_c + cir.mu * d_hat[..., 0] + cir.nu * d_hat[..., 1]
        p_mat = pseudo_inverse_fat(h) if criterion == "zf" else h.conj().T @ ups
        x = p_mat @ s_tilde
        gamma = np.sqrt(p_t) / np.linalg.norm(x, axis=0)
        gamma_bar, x_bar = block_power_realloc(gamma, x * gamma[None, :])
        outputs.append(
            (PrecodedBlock(x=x_bar, gamma=gamma, gamma_bar=gamma_bar), d_hat, s_tilde)
        )
    return outputs
