"""Minimal dense-tensor reverse-mode differentiation engine.

A Tensor wraps a float64 numpy array plus an optional tape node. The op set
is closed and small (the networks in this package need ~15 distinct ops), so
every op's backward rule is unit-tested against central finite differences.
Also provides the Adam optimizer, a Module base class for parameter
management, and the binary checkpoint format.
"""

import struct

import numpy as np

from .errors import ShapeMismatch

_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self.prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul_last(x, w):
    """Contract the last axis of x with a 2-D weight matrix: (..., F) @ (F, G)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"{x.data.shape} @ {w.data.shape}")
    data = x.data @ w.data

    def backward(g):
        _accum(x, g @ w.data.T)
        flat_x = x.data.reshape(-1, x.data.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        _accum(w, flat_x.T @ flat_g)

    return _make(data, (x, w), backward)


def _norm_axes(axes, ndim):
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def mean(x, axes, keepdims=True):
    x = as_tensor(x)
    axes = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.data.shape[a] for a in axes]))
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _make(data, (x,), backward)


def rsum(x, axes, keepdims=True):
    x = as_tensor(x)
    axes = _norm_axes(axes, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), backward)


def amax(x, axes, keepdims=True):
    """Max over axes; ties share the incoming gradient equally."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.data.ndim)
    kept = x.data.max(axis=axes, keepdims=True)
    data = kept if keepdims else kept.reshape(
        tuple(s for i, s in enumerate(x.data.shape) if i not in axes)
    )

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = x.data == kept
        count = mask.sum(axis=axes, keepdims=True)
        _accum(x, g * mask / count)

    return _make(data, (x,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(
        x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.data.shape))
    )


def repeat_new_axis(x, axis, n):
    """Insert a new axis and replicate n times (the broadcast op)."""
    x = as_tensor(x)
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(data, (x,), lambda g: _accum(x, g.sum(axis=axis)))


def diag_part(x, axis1=1, axis2=2):
    """Extract x[..., i, i, ...] over a pair of equal-length axes."""
    x = as_tensor(x)
    if x.data.shape[axis1] != x.data.shape[axis2]:
        raise ShapeMismatch("diagonal axes must have equal length")
    data = np.moveaxis(np.diagonal(x.data, axis1=axis1, axis2=axis2), -1, axis1)

    def backward(g):
        gx = np.zeros_like(x.data)
        gd = np.moveaxis(np.diagonal(gx, axis1=axis1, axis2=axis2), -1, axis1)
        gd.flags.writeable = True
        gd[...] = g
        _accum(x, gx)

    return _make(data, (x,), backward)


def relu(x):
    x = as_tensor(x)
    return _make(
        np.maximum(x.data, 0.0), (x,), lambda g: _accum(x, g * (x.data > 0))
    )


def prelu(x, slope):
    """Leaky rectifier with one learnable slope shared across channels."""
    x, slope = as_tensor(x), as_tensor(slope)
    a = slope.data.reshape(())
    data = np.where(x.data > 0, x.data, a * x.data)

    def backward(g):
        _accum(x, g * np.where(x.data > 0, 1.0, a))
        _accum(slope, np.sum(g * np.minimum(x.data, 0.0)).reshape(slope.data.shape))

    return _make(data, (x, slope), backward)


def sigmoid(x):
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, (x,), lambda g: _accum(x, g * s * (1.0 - s)))


def silu(x):
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(
        x.data * s, (x,), lambda g: _accum(x, g * s * (1.0 + x.data * (1.0 - s)))
    )


def softplus(x):
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(data, (x,), lambda g: _accum(x, g * s))


def softmax(x, axis):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Normalize over every axis except the last (features).

    In training mode uses batch statistics and updates the running arrays in
    place; in eval mode it is a fixed affine map of the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        gx = g * gamma.data * inv
        if training:
            n = x.data.size // x.data.shape[-1]
            gx = gx - gx.mean(axis=axes) - xhat * (gx * xhat).sum(axis=axes) / n
        _accum(x, gx)

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Parameter containers


class Module:
    """Base class with recursive parameter/buffer discovery by attribute name."""

    def __init__(self):
        self.training = True

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train_mode(self, flag=True):
        self.training = flag
        for _, child in self._children():
            child.train_mode(flag)
        return self

    def eval_mode(self):
        return self.train_mode(False)

    def state_dict(self):
        state = {n: t.data for n, t in self.named_parameters()}
        state.update({n: b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in own:
                if own[name].data.shape != arr.shape:
                    raise ShapeMismatch(f"{name}: {own[name].data.shape} vs {arr.shape}")
                own[name].data = np.array(arr, dtype=np.float64)
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unknown array {name!r} in checkpoint")


def uniform_init(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    """Dense map along the feature axis, fan-in uniform initialization."""

    def __init__(self, f_in, f_out, rng):
        super().__init__()
        bound = np.sqrt(1.0 / f_in)
        self.weight = uniform_init(rng, (f_in, f_out), bound)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def forward(self, x):
        return add(matmul_last(x, self.weight), self.bias)


class BatchNorm(Module):
    """Per-feature normalization over batch and equivariant axes."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, f, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(f), requires_grad=True)
        self.beta = Tensor(np.zeros(f), requires_grad=True)
        self.running_mean = np.zeros(f)
        self.running_var = np.ones(f)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class PRelu(Module):
    def __init__(self, init=0.25):
        super().__init__()
        self.slope = Tensor(np.array([init]), requires_grad=True)

    def forward(self, x):
        return prelu(x, self.slope)


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SLPC", version, then named float64 arrays.

_MAGIC = b"SLPC"
_VERSION = 1


def save_checkpoint(path, arrays):
    """Write named float64 arrays: versioned header, row-major little-endian."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
        return arrays
