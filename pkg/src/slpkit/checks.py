"""Property suites: equivariance, solver optimality, gradient correctness.

Each suite returns CheckResult rows so both the command-line `verify`
entry point and the acceptance tests can share one implementation.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnls
from .autodiff import Tensor
from .equivariant import (
    AttentionPool,
    EquivariantAttentionBlock,
    EquivariantDense,
    FeatureAttention,
    PairReduceDense,
    PositionAttention,
)
from .network import PerturbationNet
from .robust import ScalingNet


@dataclass
class CheckResult:
    name: str
    metric: float
    tol: float

    @property
    def passed(self):
        return self.metric <= self.tol


# ---------------------------------------------------------------------------
# Equivariance


def _axis_perm_dev(fn, x, axis_in, axis_out, rng, joint_axis=None):
    """Max |f(perm(x)) - perm(f(x))|; axis_out None asserts invariance."""
    y0 = fn(x)
    p = rng.permutation(x.shape[axis_in])
    xp = np.take(x, p, axis=axis_in)
    if joint_axis is not None:
        xp = np.take(xp, p, axis=joint_axis)
    y1 = fn(xp)
    ref = y0 if axis_out is None else np.take(y0, p, axis=axis_out)
    return float(np.max(np.abs(y1 - ref)))


def equivariance_suite(trials=50, seed=0, tol=1e-10):
    """Permutation checks for every layer and both assembled networks."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, devs):
        results.append(CheckResult(name, max(devs), tol))

    dense2 = EquivariantDense(2, 3, 5, rng).eval_mode()
    dense3 = EquivariantDense(3, 3, 4, rng).eval_mode()
    pair = PairReduceDense(4, 3, rng)
    pool = AttentionPool(8, axis=2, n_heads=4, rng=rng)
    fgate = FeatureAttention(4, (1, 2), rng)
    pgate = PositionAttention(2, rng)
    blk2 = EquivariantAttentionBlock(2, 4, (1, 2), rng).eval_mode()
    blk3 = EquivariantAttentionBlock(3, 4, (1, 2), rng).eval_mode()
    pnet = PerturbationNet(width=4, depth=2, seed=seed + 1).eval_mode()
    snet = ScalingNet(width=8, depth3d=1, depth2d=1, seed=seed + 2).eval_mode()

    d2 = lambda a: dense2.forward(Tensor(a)).data
    d3 = lambda a: dense3.forward(Tensor(a)).data
    fp = lambda a: pair.forward(Tensor(a)).data
    fo = lambda a: pool.forward(Tensor(a)).data
    fg = lambda a: fgate.forward(Tensor(a)).data * a
    pg = lambda a: pgate.forward(Tensor(a)).data * a
    f2 = lambda a: blk2.forward(Tensor(a)).data
    f3 = lambda a: blk3.forward(Tensor(a)).data

    buckets = {
        "dense2d.axis1": [], "dense2d.axis2": [],
        "dense3d.axis1": [], "dense3d.axis2": [], "dense3d.axis3": [],
        "pair_reduce.users": [], "pair_reduce.symbols": [],
        "attention_pool.invariance": [], "attention_pool.equivariance": [],
        "feature_gate": [], "position_gate": [],
        "block2d.axis1": [], "block2d.axis2": [],
        "block3d.axis1": [], "block3d.axis2": [], "block3d.axis3": [],
        "perturbation_net.users": [], "perturbation_net.symbols": [],
        "scaling_net.users": [], "scaling_net.antennas": [], "scaling_net.symbols": [],
    }
    for _ in range(trials):
        x2 = rng.standard_normal((2, 4, 5, 3))
        x3 = rng.standard_normal((2, 3, 4, 5, 3))
        c = rng.standard_normal((2, 4, 4, 5, 4))
        xp = rng.standard_normal((2, 3, 5, 4, 8))
        xg = rng.standard_normal((2, 4, 5, 4))
        buckets["dense2d.axis1"].append(_axis_perm_dev(d2, x2, 1, 1, rng))
        buckets["dense2d.axis2"].append(_axis_perm_dev(d2, x2, 2, 2, rng))
        buckets["dense3d.axis1"].append(_axis_perm_dev(d3, x3, 1, 1, rng))
        buckets["dense3d.axis2"].append(_axis_perm_dev(d3, x3, 2, 2, rng))
        buckets["dense3d.axis3"].append(_axis_perm_dev(d3, x3, 3, 3, rng))
        buckets["pair_reduce.users"].append(_axis_perm_dev(fp, c, 1, 1, rng, joint_axis=2))
        buckets["pair_reduce.symbols"].append(_axis_perm_dev(fp, c, 3, 2, rng))
        buckets["attention_pool.invariance"].append(_axis_perm_dev(fo, xp, 2, None, rng))
        buckets["attention_pool.equivariance"].append(_axis_perm_dev(fo, xp, 1, 1, rng))
        buckets["feature_gate"].append(_axis_perm_dev(fg, xg, 1, 1, rng))
        buckets["position_gate"].append(_axis_perm_dev(pg, xg, 2, 2, rng))
        x3w = rng.standard_normal((2, 3, 4, 5, 4))
        buckets["block2d.axis1"].append(_axis_perm_dev(f2, xg, 1, 1, rng))
        buckets["block2d.axis2"].append(_axis_perm_dev(f2, xg, 2, 2, rng))
        buckets["block3d.axis1"].append(_axis_perm_dev(f3, x3w, 1, 1, rng))
        buckets["block3d.axis2"].append(_axis_perm_dev(f3, x3w, 2, 2, rng))
        buckets["block3d.axis3"].append(_axis_perm_dev(f3, x3w, 3, 3, rng))

        bias = rng.standard_normal((1, 4, 5, 4))
        coef = rng.standard_normal((1, 4, 4, 5, 8))
        d0 = pnet.predict(bias, coef)
        pk = rng.permutation(4)
        buckets["perturbation_net.users"].append(
            float(np.max(np.abs(pnet.predict(bias[:, pk], coef[:, pk][:, :, pk]) - d0[:, pk])))
        )
        pl = rng.permutation(5)
        buckets["perturbation_net.symbols"].append(
            float(np.max(np.abs(pnet.predict(bias[:, :, pl], coef[:, :, :, pl]) - d0[:, :, pl])))
        )
        xin = rng.standard_normal((1, 3, 5, 4, 8))
        p0 = snet.predict(xin)
        pu = rng.permutation(3)
        buckets["scaling_net.users"].append(
            float(np.max(np.abs(snet.predict(xin[:, pu]) - p0[:, pu])))
        )
        pa = rng.permutation(5)
        buckets["scaling_net.antennas"].append(
            float(np.max(np.abs(snet.predict(xin[:, :, pa]) - p0)))
        )
        ps = rng.permutation(4)
        buckets["scaling_net.symbols"].append(
            float(np.max(np.abs(snet.predict(xin[:, :, :, ps]) - p0[:, :, ps])))
        )
    for name, devs in buckets.items():
        record(name, devs)
    return results


# ---------------------------------------------------------------------------
# Gradients


def directional_gradcheck(loss_fn, params, rng, h=1e-6):
    """Central finite difference along one random direction vs reverse mode."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    direction = [rng.standard_normal(p.data.shape) for p in params]
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, direction))
    saved = [p.data.copy() for p in params]
    for p, d in zip(params, direction):
        p.data = p.data + h * d
    up = float(loss_fn().data)
    for p, s, d in zip(params, saved, direction):
        p.data = s - h * d
    down = float(loss_fn().data)
    for p, s in zip(params, saved):
        p.data = s
    fd = (up - down) / (2 * h)
    return abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)


def coordinate_gradcheck(fn, tensors, rng, h=1e-6):
    """Exhaustive per-coordinate finite differences for one op."""
    weights = {}

    def loss():
        out = fn()
        if "w" not in weights:
            weights["w"] = rng.standard_normal(out.data.shape)
        return ad.rsum(
            ad.mul(out, Tensor(weights["w"])), tuple(range(out.data.ndim)), keepdims=False
        )

    for t in tensors:
        t.grad = None
    loss().backward()
    worst = 0.0
    for t in tensors:
        g = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss().data)
            flat[i] = orig - h
            down = float(loss().data)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
    return worst


def op_gradient_suite(seed=0, tol=1e-4):
    """Coordinate-wise finite-difference checks of every registered op."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    y = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    slope = Tensor(np.array([0.3]), requires_grad=True)
    gam = Tensor(np.ones(5), requires_grad=True)
    bet = Tensor(np.zeros(5), requires_grad=True)
    sq = Tensor(rng.standard_normal((4, 4, 3)), requires_grad=True)
    rm, rv = np.zeros(5), np.ones(5)
    ops = {
        "add": (lambda: ad.add(x, y), [x, y]),
        "mul": (lambda: ad.mul(x, y), [x, y]),
        "neg": (lambda: ad.neg(x), [x]),
        "matmul_last": (lambda: ad.matmul_last(x, w), [x, w]),
        "mean": (lambda: ad.mean(x, (0, 2), keepdims=True), [x]),
        "mean_reduce": (lambda: ad.mean(x, 1, keepdims=False), [x]),
        "rsum": (lambda: ad.rsum(x, (1,), keepdims=True), [x]),
        "amax": (lambda: ad.amax(x, (0, 1), keepdims=True), [x]),
        "concat": (lambda: ad.concat([x, y], axis=2), [x, y]),
        "reshape": (lambda: ad.reshape(x, (3, 20)), [x]),
        "repeat_new_axis": (lambda: ad.repeat_new_axis(x, 1, 4), [x]),
        "diag_part": (lambda: ad.diag_part(sq, 0, 1), [sq]),
        "relu": (lambda: ad.relu(x), [x]),
        "prelu": (lambda: ad.prelu(x, slope), [x, slope]),
        "sigmoid": (lambda: ad.sigmoid(x), [x]),
        "silu": (lambda: ad.silu(x), [x]),
        "softplus": (lambda: ad.softplus(x), [x]),
        "softmax": (lambda: ad.softmax(x, 1), [x]),
        "batch_norm.train": (
            lambda: ad.batch_norm(x, gam, bet, rm.copy(), rv.copy(), True), [x, gam, bet],
        ),
        "batch_norm.eval": (
            lambda: ad.batch_norm(x, gam, bet, rm, rv, False), [x, gam, bet],
        ),
    }
    return [
        CheckResult(f"op.{name}", coordinate_gradcheck(fn, ts, rng), tol)
        for name, (fn, ts) in ops.items()
    ]


def network_gradient_suite(points=10, seed=0, tol=1e-4):
    """Directional finite-difference checks of the assembled networks."""
    results = []
    for point in range(points):
        rng = np.random.default_rng(seed + 1000 + point)
        pnet = PerturbationNet(width=4, depth=2, seed=seed + point)
        bias = rng.standard_normal((2, 3, 4, 4))
        coef = rng.standard_normal((2, 3, 3, 4, 8))
        target = rng.standard_normal((2, 3, 4, 2))

        def ploss():
            out = pnet.forward(Tensor(bias), Tensor(coef))
            diff = ad.add(out, ad.neg(Tensor(target)))
            return ad.mean(ad.mul(diff, diff), (0, 1, 2, 3), keepdims=False)

        err = directional_gradcheck(ploss, pnet.parameters(), rng)
        results.append(CheckResult(f"perturbation_net.point{point}", err, tol))

        snet = ScalingNet(width=8, depth3d=1, depth2d=1, seed=seed + point)
        xin = rng.standard_normal((2, 3, 4, 3, 8))
        starget = rng.standard_normal((2, 3, 3))

        def sloss():
            out = snet.forward(Tensor(xin))
            diff = ad.add(out, ad.neg(Tensor(starget)))
            return ad.mean(ad.mul(diff, diff), (0, 1, 2), keepdims=False)

        err = directional_gradcheck(sloss, snet.parameters(), rng)
        results.append(CheckResult(f"scaling_net.point{point}", err, tol))
    return results


# ---------------------------------------------------------------------------
# Solver optimality


def enumeration_objective(a, b):
    """Independent NNLS oracle: exhaustive search over active sets."""
    n = a.shape[1]
    best = float(b @ b)
    for mask in range(1, 1 << n):
        cols = [j for j in range(n) if mask >> j & 1]
        sol, *_ = np.linalg.lstsq(a[:, cols], -b, rcond=None)
        if np.all(sol >= -1e-12):
            r = a[:, cols] @ sol + b
            best = min(best, float(r @ r))
    return best


def kkt_suite(instances=200, seed=0, max_n=8, obj_tol=1e-9):
    """Random-instance optimality: enumeration match plus KKT residuals."""
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    worst_stat = 0.0
    worst_slack = 0.0
    for trial in range(instances):
        m = int(rng.integers(2, 2 * max_n))
        n = int(rng.integers(1, max_n + 1))
        a = rng.standard_normal((m, n))
        if trial % 4 == 0:
            a[:, int(rng.integers(0, n))] = 0.0
        b = rng.standard_normal(m)
        sol = nnls.solve(a, b)
        if not sol.optimal:
            worst_stat = np.inf
            continue
        stat, slack = nnls.kkt_residuals(a, b, sol.delta)
        scale = max(float(np.max(np.abs(a.T @ b))), 1e-30)
        worst_stat = max(worst_stat, stat / scale)
        worst_slack = max(worst_slack, slack / scale)
        worst_gap = max(worst_gap, abs(sol.objective - enumeration_objective(a, b)))
    return [
        CheckResult("nnls.enumeration_gap", worst_gap, obj_tol),
        CheckResult("nnls.stationarity_over_scale", worst_stat, 10 * nnls.DEFAULT_TOL),
        CheckResult("nnls.slackness_over_scale", worst_slack, 10 * nnls.DEFAULT_TOL),
    ]


SUITES = {
    "equivariance": lambda: equivariance_suite(),
    "gradients": lambda: op_gradient_suite() + network_gradient_suite(),
    "kkt": lambda: kkt_suite(),
}


def run_suites(names):
    results = []
    for name in names:
        results.extend(SUITES[name]())
    return results
