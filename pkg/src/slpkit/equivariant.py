"""Permutation-equivariant building blocks.

Convention: every layer takes tensors shaped (batch, M_1, ..., M_N, F) where
the M_i are equivariant axes and F is the feature axis. Weight counts never
depend on the equivariant lengths, so one parameter set evaluates at any
problem size.
"""

import itertools

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Linear, Module, PRelu, Tensor


def _subsets(axes):
    """All subsets of the given axes, the empty set first."""
    out = []
    for r in range(len(axes) + 1):
        out.extend(itertools.combinations(axes, r))
    return out


class EquivariantDense(Module):
    """Linear layer equivariant to independent permutations of each axis.

    One weight matrix per subset of the equivariant axes; each term averages
    the input over its subset before the feature map, which is the complete
    parameter-sharing pattern for this symmetry group.
    """

    def __init__(self, n_dims, f_in, f_out, rng):
        super().__init__()
        self.n_dims = n_dims
        bound = np.sqrt(1.0 / (2**n_dims * f_in))
        self.weights = [
            ad.uniform_init(rng, (f_in, f_out), bound) for _ in range(2**n_dims)
        ]
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def named_parameters(self, prefix=""):
        for i, w in enumerate(self.weights):
            yield f"{prefix}weights.{i}", w
        yield f"{prefix}bias", self.bias

    def forward(self, x):
        axes = tuple(range(1, self.n_dims + 1))
        out = None
        for subset, w in zip(_subsets(axes), self.weights):
            term = x if not subset else ad.mean(x, subset, keepdims=True)
            term = ad.matmul_last(term, w)
            out = term if out is None else ad.add(out, term)
        return ad.add(out, self.bias)


class PairReduceDense(Module):
    """Equivariant linear map from paired-user tensors to per-user tensors.

    Input (B, K, K, L, F) -> output (B, K, L, G). Uses the five-element basis
    of linear maps commuting with a joint permutation of the two user axes
    (diagonal, row mean, column mean, full mean, diagonal mean), each crossed
    with {identity, mean} over the symbol axis: ten weight matrices total.
    """

    def __init__(self, f_in, f_out, rng):
        super().__init__()
        bound = np.sqrt(1.0 / (10 * f_in))
        self.weights = [
            ad.uniform_init(rng, (f_in, f_out), bound) for _ in range(10)
        ]
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def named_parameters(self, prefix=""):
        for i, w in enumerate(self.weights):
            yield f"{prefix}weights.{i}", w
        yield f"{prefix}bias", self.bias

    def forward(self, c):
        b, k = c.data.shape[0], c.data.shape[1]
        n_sym, f = c.data.shape[3], c.data.shape[4]
        diag = ad.diag_part(c, axis1=1, axis2=2)  # (B,K,L,F)
        reduced = [
            diag,
            ad.mean(c, 2, keepdims=False),  # row mean
            ad.mean(c, 1, keepdims=False),  # column mean
            ad.reshape(ad.mean(c, (1, 2), keepdims=False), (b, 1, n_sym, f)),
            ad.mean(diag, 1, keepdims=True),
        ]
        out = None
        for i, r in enumerate(reduced):
            t1 = ad.matmul_last(r, self.weights[2 * i])
            t2 = ad.matmul_last(ad.mean(r, 2, keepdims=True), self.weights[2 * i + 1])
            term = ad.add(t1, t2)
            out = term if out is None else ad.add(out, term)
        return ad.add(out, self.bias)


class AttentionPool(Module):
    """Multi-head learned-query attention pooling over one axis.

    Keys and values are per-head linear maps of the features; a learned query
    scores the keys, softmax over the pooled axis weights the values, and
    heads are concatenated. Output is invariant to permutations of the pooled
    axis and keeps the feature width.
    """

    def __init__(self, f, axis, n_heads=4, rng=None):
        super().__init__()
        if f % n_heads:
            raise ValueError("feature width must divide evenly into heads")
        self.axis = axis
        self.n_heads = n_heads
        self.d_head = f // n_heads
        bound = np.sqrt(1.0 / f)
        self.key_maps = [
            ad.uniform_init(rng, (f, self.d_head), bound) for _ in range(n_heads)
        ]
        self.value_maps = [
            ad.uniform_init(rng, (f, self.d_head), bound) for _ in range(n_heads)
        ]
        self.queries = [
            ad.uniform_init(rng, (self.d_head, 1), 1.0) for _ in range(n_heads)
        ]

    def named_parameters(self, prefix=""):
        for group, name in (
            (self.key_maps, "key_maps"),
            (self.value_maps, "value_maps"),
            (self.queries, "queries"),
        ):
            for i, w in enumerate(group):
                yield f"{prefix}{name}.{i}", w

    def forward(self, x):
        heads = []
        scale = 1.0 / np.sqrt(self.d_head)
        for wk, wv, q in zip(self.key_maps, self.value_maps, self.queries):
            scores = ad.mul(ad.matmul_last(ad.matmul_last(x, wk), q), Tensor(scale))
            attn = ad.softmax(scores, axis=self.axis)
            weighted = ad.mul(attn, ad.matmul_last(x, wv))
            heads.append(ad.rsum(weighted, self.axis, keepdims=False))
        return ad.concat(heads, axis=-1)


class FeatureAttention(Module):
    """Sigmoid gate over the feature axis from pooled statistics.

    Shares one two-layer perceptron between the max- and mean-pooled paths;
    the output broadcasts against the input (pooled axes kept at length 1).
    """

    def __init__(self, f, pool_axes, rng):
        super().__init__()
        self.pool_axes = tuple(pool_axes)
        self.fc1 = Linear(f, f, rng)
        self.fc2 = Linear(f, f, rng)

    def _mlp(self, t):
        return self.fc2.forward(ad.relu(self.fc1.forward(t)))

    def forward(self, x):
        mx = ad.amax(x, self.pool_axes, keepdims=True)
        mn = ad.mean(x, self.pool_axes, keepdims=True)
        return ad.sigmoid(ad.add(self._mlp(mx), self._mlp(mn)))


class PositionAttention(Module):
    """Sigmoid gate over equivariant positions (feature width one).

    Feature max and mean are stacked to width two, then passed through a
    rectified equivariant layer: per-subset dense maps with a ReLU applied to
    each dimension-averaged term before summation.
    """

    def __init__(self, n_dims, rng):
        super().__init__()
        self.n_dims = n_dims
        self.maps = [Linear(2, 1, rng) for _ in range(2**n_dims)]

    def forward(self, x):
        stat = ad.concat(
            [ad.amax(x, -1, keepdims=True), ad.mean(x, -1, keepdims=True)], axis=-1
        )
        axes = tuple(range(1, self.n_dims + 1))
        out = None
        for subset, lin in zip(_subsets(axes), self.maps):
            term = stat if not subset else ad.mean(stat, subset, keepdims=True)
            term = ad.relu(lin.forward(term))
            out = term if out is None else ad.add(out, term)
        return ad.sigmoid(out)


class EquivariantAttentionBlock(Module):
    """Residual equivariant block with decoupled feature/position gates.

    x' = PReLU(BN(dense(x))); x'' = BN(dense(x')); gated first along features
    then along equivariant positions; PReLU(gated + x) closes the residual.
    Feature width is preserved so blocks stack.
    """

    def __init__(self, n_dims, f, fa_pool_axes, rng):
        super().__init__()
        self.dense1 = EquivariantDense(n_dims, f, f, rng)
        self.bn1 = BatchNorm(f)
        self.act1 = PRelu()
        self.dense2 = EquivariantDense(n_dims, f, f, rng)
        self.bn2 = BatchNorm(f)
        self.feature_gate = FeatureAttention(f, fa_pool_axes, rng)
        self.position_gate = PositionAttention(n_dims, rng)
        self.act_out = PRelu()

    def forward(self, x):
        h = self.act1.forward(self.bn1.forward(self.dense1.forward(x)))
        h = self.bn2.forward(self.dense2.forward(h))
        h = ad.mul(self.feature_gate.forward(h), h)
        h = ad.mul(self.position_gate.forward(h), h)
        return self.act_out.forward(ad.add(h, x))
