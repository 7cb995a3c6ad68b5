"""Small float64 reverse-mode autodiff over numpy arrays.

Only the ops the network needs are provided. Each op computes its forward
value eagerly and records a closure mapping the output gradient to parent
gradients; :func:`backward` walks the graph in reverse topological order and
accumulates into ``Parameter.grad`` (and any leaf created with
``requires_grad=True``).

Any op producing NaN or Inf raises :class:`NonFiniteError` immediately.
"""
from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    pass


class ShapeMismatchError(ValueError):
    pass


class NotScalarError(ValueError):
    pass


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


class Parameter(Tensor):
    """Trainable leaf. ``kind`` is ``"weight"`` or ``"bias"`` (biases skip weight decay)."""

    def __init__(self, data, name: str = "", kind: str = "weight"):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.kind = kind
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dropout(a, p: float, rng=None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity when not training."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0, 1)")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- shape ops and reductions ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if b.ndim == 1:
        back = lambda g: (np.outer(g, b.data), a.data.T @ g)
    else:
        back = lambda g: (g @ b.data.T, a.data.T @ g)
    return _result(out, (a, b), back, "matmul")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_rows(a) -> Tensor:
    return mean(a, axis=0)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), back, "index")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _result(a.data[idx], (a,), lambda g: (kernels.segment_sum(g, idx, n),), "gather_rows")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ShapeMismatchError(f"segment_sum: {a.shape[0]} rows vs {seg.shape[0]} ids")
    out = kernels.segment_sum(a.data, seg, num_segments)
    return _result(out, (a,), lambda g: (g[seg],), "segment_sum")


def softmax_segmented(logits, segment_ids, num_segments: int) -> Tensor:
    """Softmax of a 1-D tensor within each segment."""
    a = as_tensor(logits)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if a.ndim != 1 or seg.shape != a.shape:
        raise ShapeMismatchError("softmax_segmented expects 1-D logits aligned with segment ids")
    out = kernels.segment_softmax(a.data, seg, num_segments)

    def back(g):
        dot = kernels.segment_sum((out * g)[:, None], seg, num_segments)[:, 0]
        return (out * (g - dot[seg]),)

    return _result(out, (a,), back, "softmax_segmented")


# -- backward --------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise NotScalarError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- randomness, init, optimiser ---------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """Seeded generator: SplitMix64 expands the u64 seed into a PCG64 state.

    ``fork(tag)`` derives an independent stream deterministically, so adding
    draws in one component never shifts another component's stream.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        state, words = self.seed, []
        for _ in range(4):
            state, out = splitmix64(state)
            words.append(out)
        self.gen = np.random.Generator(np.random.PCG64(words))

    def fork(self, tag: int) -> "Rng":
        _, out = splitmix64(self.seed ^ ((int(tag) * 0xD1B54A32D192ED03) & _MASK64))
        return Rng(out)

    def random(self, shape=None):
        return self.gen.random(shape)

    def uniform(self, low, high, shape=None):
        return self.gen.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None):
        return self.gen.normal(loc, scale, shape)

    def permutation(self, n):
        return self.gen.permutation(n)


def xavier_uniform(shape, rng: Rng) -> np.ndarray:
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def adam_step(opt: Adam) -> None:
    opt.step()


# -- checkpoint file ---------------------------------------------------------------

CKPT_MAGIC = b"MLPK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_checkpoint(named: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not an MLPK checkpoint")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(data):
                raise CheckpointError(f"parameter {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out
