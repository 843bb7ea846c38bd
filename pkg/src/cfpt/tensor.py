"""Dense tensors with reverse-mode differentiation.

The operator set is exactly what the pyramid blocks need: affine maps,
batched matrix products, stable softmax, shape movement (reshape/permute/
concat/slice), ReLU, elementwise arithmetic, and two indexed-copy
primitives (`take` / `put_mean`) that realize sliding-window partitions
and their inverses as explicit index maps.

Every operation records a backward rule on the result; `backward(root)`
replays the tape from a scalar root and accumulates gradients into every
`requires_grad` tensor exactly once per use.  Tensors are immutable after
construction except for their gradient buffers; one tape must stay on one
thread.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# Wider accumulator used by put_mean so that averaging n identical copies
# of a value returns it bit-exactly (n * x is exact in the wide significand
# for every coverage count the partitions can produce).
_WIDE = {np.dtype(np.float32): np.float64,
         np.dtype(np.float64): getattr(np, "float128", np.float64)}


class Tensor:
    """N-d array of float32/float64 values plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def reshape(self, dims):
        return reshape(self, dims)

    def permute(self, axes):
        return permute(self, axes)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(dims={tuple(self.dims)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, bwd):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


# ---------------------------------------------------------------------------
# MAC accounting.  Only contractions (matmul_batched, affine) spend MACs;
# data movement and pointwise maps count zero under the 1 MAC = 1 FLOP
# convention used by the cost reports.

class MacCounter:
    """Accumulates multiply-accumulate counts keyed by scope path."""

    def __init__(self):
        self.counts = {}
        self._stack = []

    def add(self, n):
        key = "/".join(self._stack) if self._stack else "(unscoped)"
        self.counts[key] = self.counts.get(key, 0) + int(n)

    @property
    def total(self):
        return sum(self.counts.values())

    def grouped(self, depth=None):
        """Counts re-keyed to the first `depth` scope components."""
        if depth is None:
            return dict(self.counts)
        out = {}
        for key, n in self.counts.items():
            short = "/".join(key.split("/")[:depth])
            out[short] = out.get(short, 0) + n
        return out


_COUNTER: MacCounter | None = None


@contextmanager
def count_macs():
    """Activate a fresh MacCounter for the duration of the block."""
    global _COUNTER
    prev = _COUNTER
    counter = MacCounter()
    _COUNTER = counter
    try:
        yield counter
    finally:
        _COUNTER = prev


@contextmanager
def mac_scope(name):
    if _COUNTER is None:
        yield
        return
    _COUNTER._stack.append(name)
    try:
        yield
    finally:
        _COUNTER._stack.pop()


def _spend_macs(n):
    if _COUNTER is not None:
        _COUNTER.add(n)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting, gradients reduced back).

def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def sub(a, b):
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def mul(a, b):
    b = _as_tensor(b, a)
    _check_same_dtype("mul", a, b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), bwd)


def scale(x, s):
    s = float(s)
    data = x.data * x.data.dtype.type(s)

    def bwd(g):
        _accum(x, g * x.data.dtype.type(s))

    return _result(data, (x,), bwd)


def relu(x):
    data = np.maximum(x.data, 0)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _result(data, (x,), bwd)


def sum_all(x):
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Shape movement.

def reshape(x, dims):
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: {tuple(x.dims)} has {x.data.size} elements, target {dims}")
    data = x.data.reshape(dims)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(data, (x,), bwd)


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: axes {axes} are not a permutation of rank {x.data.ndim}")
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, g.transpose(inv))

    return _result(data, (x,), bwd)


def concat_along_axis(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_along_axis: empty operand list")
    for t in tensors[1:]:
        _check_same_dtype("concat_along_axis", tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _result(data, tuple(tensors), bwd)


def slice_along_axis(x, axis, start, stop):
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Contractions.

def matmul_batched(a, b):
    """Batched matrix product over the trailing two axes.

    Leading axes must match exactly; the backward rule is the usual pair of
    transposed products.
    """
    _check_same_dtype("matmul_batched", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul_batched: operands must be >= 2-d, got {tuple(a.dims)} x {tuple(b.dims)}")
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul_batched: incompatible dims {tuple(a.dims)} x {tuple(b.dims)}")
    data = np.matmul(a.data, b.data)
    batch = int(np.prod(a.data.shape[:-2], dtype=np.int64))
    _spend_macs(batch * a.data.shape[-2] * a.data.shape[-1] * b.data.shape[-1])

    def bwd(g):
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _result(data, (a, b), bwd)


def affine(x, weight, bias):
    """y = x @ weight + bias along the trailing axis."""
    _check_same_dtype("affine", x, weight)
    _check_same_dtype("affine", x, bias)
    d_in, d_out = weight.data.shape if weight.data.ndim == 2 else (None, None)
    if d_in is None or x.data.shape[-1] != d_in or bias.data.shape != (d_out,):
        raise ShapeError(
            f"affine: x {tuple(x.dims)} with weight {tuple(weight.dims)} and bias {tuple(bias.dims)}")
    data = np.matmul(x.data, weight.data) + bias.data
    rows = x.data.size // d_in
    _spend_macs(rows * d_in * d_out)

    def bwd(g):
        _accum(x, np.matmul(g, weight.data.T))
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        _accum(weight, x2.T @ g2)
        _accum(bias, g2.sum(axis=0))

    return _result(data, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# Softmax.

def softmax_lastdim(x):
    """Row-stochastic softmax over the trailing axis, max-subtracted."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_lastdim: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, data * (g - inner))

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Indexed copies.  `indices` are integer positions into x.ravel(); -1 reads
# (or discards) a zero-padding slot.  Both maps are linear, so each op's
# backward is the other's index arithmetic.

def take(x, indices):
    indices = np.asarray(indices)
    if indices.size and (indices.max() >= x.data.size or indices.min() < -1):
        raise ShapeError(f"take: index out of range for {x.data.size} elements")
    valid = indices >= 0
    data = np.where(valid, x.data.ravel()[np.where(valid, indices, 0)], x.data.dtype.type(0))

    def bwd(g):
        gx = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(gx, indices[valid], g[valid])
        _accum(x, gx.reshape(x.data.shape))

    return _result(data, (x,), bwd)


def put_mean(x, indices, size):
    """Adjoint of `take` with coverage averaging.

    Output slot p receives the arithmetic mean of every x element whose
    index is p; elements indexed -1 are discarded.  Accumulation runs in a
    wider float so that averaging identical copies is bit-exact.
    """
    indices = np.asarray(indices)
    if indices.shape != x.data.shape:
        raise ShapeError(f"put_mean: index dims {indices.shape} != value dims {tuple(x.dims)}")
    if indices.size and indices.max() >= size:
        raise ShapeError(f"put_mean: index out of range for size {size}")
    valid = indices >= 0
    flat_idx = indices[valid]
    counts = np.bincount(flat_idx, minlength=size)
    safe = np.maximum(counts, 1)
    wide = _WIDE[x.data.dtype]
    acc = np.zeros(size, dtype=wide)
    np.add.at(acc, flat_idx, x.data[valid].astype(wide))
    data = (acc / safe).astype(x.data.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[valid] = (g / safe)[flat_idx]
        _accum(x, gx)

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Reverse pass.

def backward(root):
    """Accumulate d(root)/d(leaf) into .grad of every requires_grad tensor."""
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got dims {tuple(root.dims)}")
    if not root.requires_grad:
        return

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._bwd is not None:
            node._bwd(node.grad)
