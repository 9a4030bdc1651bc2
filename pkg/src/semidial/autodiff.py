"""Reverse-mode automatic differentiation over float64 numpy arrays.

Everything downstream (the semi-supervised action model, the recurrent
latent dynamics model, the discriminator and the policy surrogates) builds
its training objectives out of these primitives, so gradients of any
objective can be cross-checked against central finite differences.

Scope is deliberately small: rank <= 2 arrays, numpy-style broadcasting
between them, no views. Each operation returns a fresh `Value` recording
its parents and a backward closure; `backward()` walks the tape once.
"""

from __future__ import annotations

import numpy as np


class EngineError(Exception):
    """Base class for kernel failures."""


class ShapeMismatchError(EngineError):
    pass


class NumericError(EngineError):
    pass


class DuplicateParameterError(EngineError):
    pass


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeMismatchError(f"rank {arr.ndim} array not supported (max rank 2)")
    return arr


class Value:
    """Node in the computation tape: float64 data plus optional gradient."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, parents=(), bwd=None, check=True):
        self.data = _as_array(data)
        if check and not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite value produced in forward pass")
        self.grad = None
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this (scalar) value into the tape leaves."""
        if self.data.size != 1:
            raise ShapeMismatchError(f"backward() needs a scalar, got shape {self.shape}")
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
        self.grad = _accum(self.grad, np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # operator sugar; non-Value operands become constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Value(shape={self.shape})"


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _accum(slot, g):
    # accumulation always allocates fresh arrays (slot + g), and no backward
    # closure mutates a stored gradient in place, so aliasing g is safe
    return g if slot is None else slot + g


def _add_grad(node: Value, g: np.ndarray):
    node.grad = _accum(node.grad, g)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def constant(x) -> Value:
    """A leaf that takes no gradient (inputs, targets, frozen noise)."""
    v = Value(x)
    v._bwd = None
    return v


def stop_grad(x: Value) -> Value:
    return constant(x.data)


def add(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    out = Value(a.data + b.data, (a, b))

    def bwd(g):
        _add_grad(a, _unbroadcast(g, a.shape))
        _add_grad(b, _unbroadcast(g, b.shape))

    out._bwd = bwd
    return out


def sub(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    out = Value(a.data - b.data, (a, b))

    def bwd(g):
        _add_grad(a, _unbroadcast(g, a.shape))
        _add_grad(b, _unbroadcast(-g, b.shape))

    out._bwd = bwd
    return out


def mul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    out = Value(a.data * b.data, (a, b))

    def bwd(g):
        _add_grad(a, _unbroadcast(g * b.data, a.shape))
        _add_grad(b, _unbroadcast(g * a.data, b.shape))

    out._bwd = bwd
    return out


def matmul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Value(a.data @ b.data, (a, b))

    def bwd(g):
        _add_grad(a, g @ b.data.T)
        _add_grad(b, a.data.T @ g)

    out._bwd = bwd
    return out


def tanh(x: Value) -> Value:
    x = _wrap(x)
    y = np.tanh(x.data)
    out = Value(y, (x,))

    def bwd(g):
        _add_grad(x, g * (1.0 - y * y))

    out._bwd = bwd
    return out


def sigmoid(x: Value) -> Value:
    x = _wrap(x)
    # stable in both tails
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = Value(y, (x,))

    def bwd(g):
        _add_grad(x, g * y * (1.0 - y))

    out._bwd = bwd
    return out


def exp(x: Value) -> Value:
    x = _wrap(x)
    y = np.exp(x.data)
    out = Value(y, (x,))

    def bwd(g):
        _add_grad(x, g * y)

    out._bwd = bwd
    return out


def log(x: Value) -> Value:
    x = _wrap(x)
    out = Value(np.log(x.data), (x,))

    def bwd(g):
        _add_grad(x, g / x.data)

    out._bwd = bwd
    return out


def softplus(x: Value) -> Value:
    """log(1 + e^x), computed without overflow."""
    x = _wrap(x)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    out = Value(y, (x,))

    def bwd(g):
        s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                     np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
        _add_grad(x, g * s)

    out._bwd = bwd
    return out


def clamp(x: Value, lo: float, hi: float) -> Value:
    """Elementwise clip; gradient is zero outside [lo, hi]."""
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)
    out = Value(np.clip(x.data, lo, hi), (x,))

    def bwd(g):
        _add_grad(x, g * inside)

    out._bwd = bwd
    return out


def minimum(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out = Value(np.minimum(a.data, b.data), (a, b))

    def bwd(g):
        _add_grad(a, _unbroadcast(g * take_a, a.shape))
        _add_grad(b, _unbroadcast(g * ~take_a, b.shape))

    out._bwd = bwd
    return out


def vsum(x: Value, axis=None, keepdims=False) -> Value:
    x = _wrap(x)
    out = Value(x.data.sum(axis=axis, keepdims=keepdims), (x,))

    def bwd(g):
        if axis is None:
            _add_grad(x, np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _add_grad(x, np.broadcast_to(gg, x.shape).copy())

    out._bwd = bwd
    return out


def vmean(x: Value, axis=None, keepdims=False) -> Value:
    x = _wrap(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(values, axis=0) -> Value:
    values = [_wrap(v) for v in values]
    out = Value(np.concatenate([v.data for v in values], axis=axis), tuple(values))
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _add_grad(v, g[tuple(sl)])

    out._bwd = bwd
    return out


def take_rows(table: Value, ids) -> Value:
    """Row lookup (embedding gather); gradient scatter-adds into the table."""
    table = _wrap(table)
    idx = np.asarray(ids, dtype=np.intp)
    out = Value(table.data[idx], (table,))

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _add_grad(table, gt)

    out._bwd = bwd
    return out


def take_per_row(x: Value, ids) -> Value:
    """out[i] = x[i, ids[i]] for a rank-2 input; returns a rank-1 value."""
    x = _wrap(x)
    idx = np.asarray(ids, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = Value(x.data[rows, idx], (x,))

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _add_grad(x, gx)

    out._bwd = bwd
    return out


def slice_cols(x: Value, lo: int, hi: int) -> Value:
    x = _wrap(x)
    out = Value(x.data[:, lo:hi], (x,))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        _add_grad(x, gx)

    out._bwd = bwd
    return out


def slice_rows(x: Value, lo: int, hi: int) -> Value:
    x = _wrap(x)
    out = Value(x.data[lo:hi], (x,))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[lo:hi] = g
        _add_grad(x, gx)

    out._bwd = bwd
    return out


def transpose(x: Value) -> Value:
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError("transpose needs a rank-2 value")
    out = Value(x.data.T, (x,))

    def bwd(g):
        _add_grad(x, g.T)

    out._bwd = bwd
    return out


def repeat_rows(x: Value, k: int) -> Value:
    """Repeat each row k times consecutively: (B, d) -> (B*k, d)."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError("repeat_rows needs a rank-2 value")
    out = Value(np.repeat(x.data, k, axis=0), (x,))

    def bwd(g):
        _add_grad(x, g.reshape(x.shape[0], k, x.shape[1]).sum(axis=1))

    out._bwd = bwd
    return out


def reshape(x: Value, shape) -> Value:
    x = _wrap(x)
    out = Value(x.data.reshape(shape), (x,))

    def bwd(g):
        _add_grad(x, g.reshape(x.shape))

    out._bwd = bwd
    return out


class ParamSet:
    """Named collection of trainable Values plus layer registrations.

    Names are unique; gradient accumulation is additive across a minibatch
    and the caller zeroes grads explicitly between steps.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.rng_seed)))
        self._params: dict[str, Value] = {}
        self.layers: dict[str, tuple] = {}

    def add(self, name: str, shape, init="normal", scale=None) -> Value:
        if name in self._params:
            raise DuplicateParameterError(f"parameter {name!r} registered twice")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "normal":
            fan_in = shape[0] if len(shape) == 2 else max(shape[0], 1)
            s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
            data = self.rng.normal(0.0, s, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        v = Value(data)
        self._params[name] = v
        return v

    def add_from(self, name: str, data: np.ndarray) -> Value:
        if name in self._params:
            raise DuplicateParameterError(f"parameter {name!r} registered twice")
        v = Value(np.array(data, dtype=np.float64))
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for v in self._params.values():
            v.grad = None

    def n_entries(self) -> int:
        return sum(v.data.size for v in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, v in self._params.items():
            src = np.asarray(arrays[k], dtype=np.float64)
            if src.shape != v.data.shape:
                raise ShapeMismatchError(f"checkpoint shape {src.shape} != {v.data.shape} for {k!r}")
            v.data = src.copy()
