"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its output with numpy and, when any input requires a
gradient, links the output to its parents together with a closure that maps
the output cotangent to input cotangents.  ``backward`` linearises that graph
into a :class:`Tape` (parents before children), walks it once in reverse and
deposits gradients on the leaves.

Arrays are float32 unless a tensor is explicitly built in float64 (used by the
finite-difference checks).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


class TensorError(Exception):
    """Base class for tensor engine failures."""


class ShapeError(TensorError, ValueError):
    pass


class NumericError(TensorError, ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = getattr(_state, "enabled", True)
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
            dtype = dtype or data.dtype
        self.data = np.ascontiguousarray(data, dtype=dtype or DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# graph construction


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, dtype) -> Tensor:
    data = np.asarray(data)
    if data.dtype != dtype:
        data = data.astype(dtype)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite value in output of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _dtype_of(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), _dtype_of(a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), _dtype_of(a, b))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,), a.data.dtype)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   _dtype_of(a, b))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
                   _dtype_of(a, b))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _result("relu", out, (a,), lambda g: (g * (out > 0),), a.data.dtype)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),), a.data.dtype)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError(f"log: non-positive input (min {a.data.min():.3g})")
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,), a.data.dtype)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _result("exp", e, (a,), lambda g: (g * e,), a.data.dtype)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), a.data.dtype)


# ---------------------------------------------------------------------------
# reductions and shape


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", out, (a,), vjp, a.data.dtype)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result("mean", out, (a,), vjp, a.data.dtype)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),), a.data.dtype)


def pad(a, width: int) -> Tensor:
    """Zero-pad the spatial axes (1 and 2) of an NHWC tensor by ``width`` on every side."""
    a = as_tensor(a)
    if width == 0:
        return a
    if a.ndim != 4:
        raise ShapeError(f"pad: expected NHWC input, got {a.shape}")
    spec = [(0, 0), (width, width), (width, width), (0, 0)]
    return _result("pad", np.pad(a.data, spec), (a,),
                   lambda g: (g[:, width:-width, width:-width, :],), a.data.dtype)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    return _result("concat", out, ts, vjp, _dtype_of(*ts))


def split_columns(a, sizes: Sequence[int]) -> list[Tensor]:
    """Split a 2-D tensor into column blocks."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover {a.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(_column_slice(a, start, start + n))
        start += n
    return out


def _column_slice(a: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _result("slice", a.data[:, lo:hi], (a,), vjp, a.data.dtype)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result("matmul", a.data @ b.data, (a, b), vjp, _dtype_of(a, b))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with an (kh, kw, in, out) kernel and zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    dtype = _dtype_of(x, w)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, o)
    out = cols @ wmat
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out += b.data
    out = out.reshape(n, ho, wo, o)
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = g.reshape(n * ho * wo, o)
        gw = (cols.T @ gm).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _result("conv2d", out, parents, vjp, dtype)


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2 over NHWC input; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal position in row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2: input {x.shape} too small")
    d = x.data
    quads = [d[:, a:2 * h2:2, b:2 * w2:2, :] for a in (0, 1) for b in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            sel = quads[k] == out
            sel &= ~taken
            taken |= sel
            gx[:, a:2 * h2:2, b:2 * w2:2, :] = g * sel
        return (gx,)

    return _result("maxpool2", out, (x,), vjp, x.data.dtype)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the spatial axes of an NHWC tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _result("upsample2", out, (x,), vjp, x.data.dtype)


def depth_to_space(x, block: int = 2) -> Tensor:
    """Rearrange (n, h, w, block*block*c) channels into (n, block*h, block*w, c)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[3] % (block * block):
        raise ShapeError(f"depth_to_space: channels of {x.shape} not divisible by {block * block}")
    n, h, w, cc = x.shape
    c = cc // (block * block)
    out = x.data.reshape(n, h, w, block, block, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * block, w * block, c)

    def vjp(g):
        return (g.reshape(n, h, block, w, block, c).transpose(0, 1, 3, 2, 4, 5).reshape(x.shape),)

    return _result("depth_to_space", out, (x,), vjp, x.data.dtype)


# ---------------------------------------------------------------------------
# losses and normalisers


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> Tensor:
    """Row-wise softmax of a (batch, classes) tensor."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected 2-D logits, got {logits.shape}")
    p = _softmax_np(logits.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax", p, (logits,), vjp, logits.data.dtype)


def softmax_ce(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_ce: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError(f"softmax_ce: label out of range for {logits.shape[1]} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _result("softmax_ce", np.asarray(loss), (logits,), vjp, logits.data.dtype)


def bce_with_logits(logits, target) -> Tensor:
    """Summed Bernoulli negative log-likelihood of ``target`` under ``sigmoid(logits)``."""
    logits = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs target {t.shape}")
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum()
    return _result("bce_with_logits", np.asarray(loss), (logits,),
                   lambda g: (g * (_stable_sigmoid(z) - t),), logits.data.dtype)


# ---------------------------------------------------------------------------
# generic dispatch


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2": maxpool2,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_ce": softmax_ce,
    "log": log,
    "exp": exp,
    "add": add,
    "mul": mul,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "pad": pad,
    "softmax": softmax,
    "upsample2": upsample2,
    "depth_to_space": depth_to_space,
    "clip": clip,
    "sub": sub,
    "div": div,
    "bce_with_logits": bce_with_logits,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a named op, e.g. ``forward_op("conv2d", [x, w], stride=1)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class Tape:
    """Topologically ordered view of a graph: parents always precede children."""

    nodes: list[Tensor] = field(default_factory=list)
    parents: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        tape = cls()
        index: dict[int, int] = {}
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in index:
                continue
            if expanded:
                index[id(t)] = len(tape.nodes)
                tape.nodes.append(t)
                tape.parents.append(tuple(index[id(p)] if p.requires_grad else -1 for p in t._parents))
                continue
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in index and p.requires_grad:
                    stack.append((p, False))
        return tape

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for t in self.nodes:
            t._parents = ()
            t._vjp = None
        self.nodes.clear()
        self.parents.clear()


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The recorded graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[-1] = np.ones(loss.shape, dtype=loss.data.dtype)
    for i in range(len(tape) - 1, -1, -1):
        node, g = tape.nodes[i], grads[i]
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for j, pg in zip(tape.parents[i], node._vjp(g)):
            if j < 0:
                continue
            grads[j] = pg if grads[j] is None else grads[j] + pg
        grads[i] = None
    if not retain_graph:
        tape.clear()
    return tape
