import numpy as np

from slpkit import autodiff as ad
from slpkit.autodiff import Tensor
from slpkit.checks import directional_gradcheck, equivariance_suite
from slpkit.equivariant import (
    AttentionPool,
    EquivariantAttentionBlock,
    EquivariantDense,
    FeatureAttention,
    PairReduceDense,
    PositionAttention,
)


def test_equivariance_suite_passes():
    results = equivariance_suite(trials=10, seed=0)
    for r in results:
        assert r.passed, f"{r.name}: {r.metric:.2e}"


class TestEquivariantDense:
    def test_identity_collapse(self):
        rng = np.random.default_rng(0)
        layer = EquivariantDense(2, 3, 3, rng)
        for w in layer.weights:
            w.data = np.zeros((3, 3))
        layer.weights[0].data = np.eye(3)
        layer.bias.data = np.zeros(3)
        x = rng.standard_normal((2, 4, 5, 3))
        np.testing.assert_allclose(layer.forward(Tensor(x)).data, x)

    def test_shape_contract(self):
        rng = np.random.default_rng(1)
        layer = EquivariantDense(2, 2, 7, rng)
        out = layer.forward(Tensor(rng.standard_normal((1, 3, 4, 2))))
        assert out.data.shape == (1, 3, 4, 7)

    def test_parameter_count(self):
        # 2^N weight matrices of F x F_O plus the bias
        rng = np.random.default_rng(2)
        layer = EquivariantDense(2, 3, 5, rng)
        n = sum(t.data.size for _, t in layer.named_parameters())
        assert n == 4 * 3 * 5 + 5
        layer3 = EquivariantDense(3, 3, 5, rng)
        n3 = sum(t.data.size for _, t in layer3.named_parameters())
        assert n3 == 8 * 3 * 5 + 5

    def test_size_generalization(self):
        rng = np.random.default_rng(3)
        layer = EquivariantDense(2, 3, 4, rng)
        for shape in ((1, 2, 2, 3), (2, 7, 5, 3), (1, 1, 9, 3)):
            assert layer.forward(Tensor(rng.standard_normal(shape))).data.shape[-1] == 4

    def test_gradients(self):
        rng = np.random.default_rng(4)
        layer = EquivariantDense(2, 3, 3, rng)
        x = rng.standard_normal((2, 3, 4, 3))

        def loss():
            out = layer.forward(Tensor(x))
            return ad.mean(ad.mul(out, out), (0, 1, 2, 3), keepdims=False)

        assert directional_gradcheck(loss, layer.parameters(), rng) < 1e-4


class TestPairReduceDense:
    def test_diagonal_basis_selectivity(self):
        rng = np.random.default_rng(5)
        layer = PairReduceDense(2, 2, rng)
        for w in layer.weights:
            w.data = np.zeros((2, 2))
        layer.weights[0].data = np.eye(2)  # diagonal extraction, identity map
        layer.bias.data = np.zeros(2)
        k, l = 4, 3
        c = np.zeros((1, k, k, l, 2))
        const = rng.standard_normal(2)
        c[0, np.arange(k), np.arange(k)] = const  # constant diagonal feature
        out = layer.forward(Tensor(c)).data
        np.testing.assert_allclose(out, np.broadcast_to(const, (1, k, l, 2)))

    def test_parameter_count(self):
        rng = np.random.default_rng(6)
        layer = PairReduceDense(3, 5, rng)
        n = sum(t.data.size for _, t in layer.named_parameters())
        assert n == 10 * 3 * 5 + 5

    def test_gradients(self):
        rng = np.random.default_rng(7)
        layer = PairReduceDense(3, 2, rng)
        c = rng.standard_normal((2, 3, 3, 4, 3))

        def loss():
            out = layer.forward(Tensor(c))
            return ad.mean(ad.mul(out, out), (0, 1, 2, 3), keepdims=False)

        assert directional_gradcheck(loss, layer.parameters(), rng) < 1e-4


class TestAttentionPool:
    def test_constant_slices_pass_through(self):
        rng = np.random.default_rng(8)
        pool = AttentionPool(8, axis=2, n_heads=4, rng=rng)
        x = rng.standard_normal((2, 3, 1, 5, 8))
        x = np.repeat(x, 6, axis=2)  # identical along the pooled axis
        out = pool.forward(Tensor(x)).data
        # any slice maps to the same value map
        ref = np.concatenate(
            [x[:, :, 0] @ w.data for w in pool.value_maps], axis=-1
        )
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        pool = AttentionPool(4, axis=1, n_heads=2, rng=rng)
        x = rng.standard_normal((2, 5, 3, 4))

        def loss():
            out = pool.forward(Tensor(x))
            return ad.mean(ad.mul(out, out), (0, 1, 2), keepdims=False)

        assert directional_gradcheck(loss, pool.parameters(), rng) < 1e-4


class TestGates:
    def test_feature_gate_constant_input(self):
        rng = np.random.default_rng(10)
        gate = FeatureAttention(3, (1, 2), rng)
        c = rng.standard_normal(3)
        x = np.broadcast_to(c, (1, 4, 5, 3)).copy()
        out = gate.forward(Tensor(x)).data
        # max pool equals mean pool on constants: sigmoid(2 f(c))
        t = Tensor(c.reshape(1, 1, 1, 3))
        f = gate.fc2.forward(ad.relu(gate.fc1.forward(t))).data
        np.testing.assert_allclose(out, 1 / (1 + np.exp(-2 * f)), atol=1e-12)
        assert np.all((out > 0) & (out < 1))

    def test_position_gate_range_and_width(self):
        rng = np.random.default_rng(11)
        gate = PositionAttention(2, rng)
        x = rng.standard_normal((2, 4, 5, 3))
        out = gate.forward(Tensor(x)).data
        assert out.shape == (2, 4, 5, 1)
        assert np.all((out > 0) & (out < 1))


class TestAttentionBlock:
    def test_zero_weights_collapse(self):
        rng = np.random.default_rng(12)
        blk = EquivariantAttentionBlock(2, 3, (1, 2), rng).eval_mode()
        for _, p in blk.named_parameters():
            if p is not blk.act_out.slope:
                p.data = np.zeros_like(p.data)
        slope = float(blk.act_out.slope.data[0])
        x = rng.standard_normal((2, 3, 4, 3))
        out = blk.forward(Tensor(x)).data
        np.testing.assert_allclose(out, np.where(x > 0, x, slope * x), atol=1e-12)

    def test_3d_shape_preserved(self):
        rng = np.random.default_rng(13)
        blk = EquivariantAttentionBlock(3, 4, (1, 2), rng).eval_mode()
        x = rng.standard_normal((2, 3, 4, 5, 4))
        assert blk.forward(Tensor(x)).data.shape == x.shape

    def test_gradients_through_block(self):
        rng = np.random.default_rng(14)
        blk = EquivariantAttentionBlock(2, 3, (1, 2), rng)
        x = rng.standard_normal((3, 3, 4, 3))

        def loss():
            out = blk.forward(Tensor(x))
            return ad.mean(ad.mul(out, out), (0, 1, 2, 3), keepdims=False)

        assert directional_gradcheck(loss, blk.parameters(), rng) < 1e-4
