"""Dense tensors with a reverse-mode gradient tape.

Operations record onto a global tape in execution order (which is a valid
topological order), and ``backward`` walks the tape in reverse, accumulating
adjoints additively into ``Tensor.grad``. Storage is float32 by default;
float64 is supported so test oracles can run the identical graph at higher
precision.

Broadcasting is restricted to trailing-shape alignment (a smaller operand
may be broadcast across leading batch axes); anything else requires an
explicit reshape/repeat so every tape node stays auditable.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

NEG_INF = -1e9  # additive mask value; exp(NEG_INF - max) underflows to exactly 0.0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of operations: (output, backward rule)."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.nodes.append((out, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    return _TAPE


def clear_tape():
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn):
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray):
    """Copy-on-write adjoint accumulation.

    The first contribution is stored by reference (it may alias another
    tensor's adjoint or a view, and is never mutated); a second contribution
    materializes a fresh owned array, after which in-place adds are safe.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if g.dtype != t.data.dtype:
            t.grad = g.astype(t.data.dtype)
            t._grad_owned = True
        else:
            t.grad = g
            t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast (leading-axis alignment)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    # axes where operand had size 1 but result did not
    ones = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    # smaller operand must align with the trailing axes of the larger one
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    tail = big[len(big) - len(small):]
    ok = all(s == t or s == 1 for s, t in zip(small, tail)) if small else True
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def backward(loss: Tensor):
    """Reverse-mode accumulation from a scalar loss over the global tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericsError("loss is not finite")
    loss.grad = np.ones_like(loss.data)
    loss._grad_owned = True
    for out, fn in reversed(_TAPE.nodes):
        if out.grad is None:
            continue
        fn(out.grad)


def assert_finite(arr: np.ndarray, where: str):
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, dtype=a.data.dtype)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, dtype=a.data.dtype)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=a.data.dtype)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, dtype=a.data.dtype)

    def back(g):
        _accum(a, g * s)

    return _record(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (..., m, k) @ (k, n) and (..., m, k) @ (..., k, n)."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {sa} @ {sb}")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul leading dimensions disagree: {sa} @ {sb}")
    out = Tensor(a.data @ b.data, dtype=a.data.dtype)

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, ga)
        if b.requires_grad:
            if len(sb) == 2 and len(sa) > 2:
                k, n = sb
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, gb)

    return _record(out, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.data.dtype)

    def back(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), dtype=a.data.dtype)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accum(a, np.transpose(g, inv))

    return _record(out, (a,), back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), dtype=parts[0].data.dtype)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _record(out, tuple(parts), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy(), dtype=a.data.dtype)

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _record(out, (a,), back)


def repeat_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Repeat each element n times along axis (explicit broadcast)."""
    out = Tensor(np.repeat(a.data, n, axis=axis), dtype=a.data.dtype)

    def back(g):
        shape = list(a.data.shape)
        shape[axis:axis + 1] = [a.data.shape[axis], n]
        _accum(a, g.reshape(shape).sum(axis=axis + 1))

    return _record(out, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.data.dtype)

    def back(g):
        _accum(a, np.full_like(a.data, g))

    return _record(out, (a,), back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean(), dtype=a.data.dtype)

    def back(g):
        _accum(a, np.full_like(a.data, g / n))

    return _record(out, (a,), back)


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), dtype=a.data.dtype)

    def back(g):
        _accum(a, g * np.sign(a.data))

    return _record(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, dtype=a.data.dtype)

    def back(g):
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, dtype=a.data.dtype)

    def back(g):
        _accum(a, g * y * (1.0 - y))

    return _record(out, (a,), back)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_A * (x * x * x))
    th = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + th), dtype=a.data.dtype)

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        _accum(a, g * d)

    return _record(out, (a,), back)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), dtype=a.data.dtype)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _record(out, (a,), back)


def atan2(s: Tensor, c: Tensor) -> Tensor:
    """Elementwise two-argument arctangent with planar gradients."""
    if s.data.shape != c.data.shape:
        raise ShapeError("atan2 operands must share a shape")
    out = Tensor(np.arctan2(s.data, c.data), dtype=s.data.dtype)
    r2 = s.data * s.data + c.data * c.data + 1e-12

    def back(g):
        _accum(s, g * c.data / r2)
        _accum(c, -g * s.data / r2)

    return _record(out, (s, c), back)


def wrap_pi(a: Tensor) -> Tensor:
    """Wrap to [-pi, pi); derivative 1 almost everywhere."""
    out = Tensor((a.data + np.pi) % (2.0 * np.pi) - np.pi, dtype=a.data.dtype)

    def back(g):
        _accum(a, g)

    return _record(out, (a,), back)


def softmax_last(a: Tensor, bias: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``bias`` is a constant additive logit mask."""
    z = a.data if bias is None else a.data + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, dtype=a.data.dtype)

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, p * (g - dot))

    return _record(out, (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, dtype=a.data.dtype)

    def back(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(a, (gx - m1 - xhat * m2) * inv)

    return _record(out, (a, gain, bias), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], dtype=table.data.dtype)

    def back(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accum(table, gt)

    return _record(out, (table,), back)


def huber(residual: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber penalty: 0.5 r^2 inside |r| <= delta, linear outside."""
    if delta <= 0:
        raise ContractError("huber delta must be positive")
    r = residual.data
    absr = np.abs(r)
    quad = 0.5 * r * r
    lin = delta * (absr - 0.5 * delta)
    out = Tensor(np.where(absr <= delta, quad, lin).mean(), dtype=r.dtype)
    n = r.size

    def back(g):
        _accum(residual, (np.clip(r, -delta, delta) / n) * g)

    return _record(out, (residual,), back)


def round_ste(a: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard threshold (inclusive at the boundary) with a straight-through backward."""
    if not (0.0 < threshold < 1.0):
        raise ContractError("round threshold must lie in (0, 1)")
    out = Tensor((a.data >= threshold).astype(a.data.dtype), dtype=a.data.dtype)

    def back(g):
        _accum(a, g)

    return _record(out, (a,), back)


def stop_grad(a: Tensor) -> Tensor:
    return Tensor(a.data.copy(), requires_grad=False, dtype=a.data.dtype)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def block_causal_bias(t: int, block: int, ctx: int = 0, dtype=np.float32) -> np.ndarray:
    """Additive logit mask for block-causal attention.

    ``t`` self tokens in frames of ``block`` tokens each; tokens of frame i may
    attend to frames <= i. ``ctx`` prepended context columns are always visible.
    """
    if block <= 0 or t % block != 0:
        raise ShapeError(f"token count {t} is not a multiple of block {block}")
    fi = np.arange(t) // block
    mask = fi[:, None] < fi[None, :]  # True above the frame diagonal
    bias = np.where(mask, NEG_INF, 0.0).astype(dtype)
    if ctx:
        bias = np.concatenate([np.zeros((t, ctx), dtype=dtype), bias], axis=1)
    return bias


def causal_attention(q: Tensor, k: Tensor, v: Tensor, block: int) -> Tensor:
    """Single-head block-causal attention over (T, d) inputs."""
    tq, d = q.data.shape
    if k.data.shape != (tq, d) or v.data.shape != (tq, d):
        raise ShapeError("causal_attention requires q, k, v of equal (T, d) shape")
    bias = block_causal_bias(tq, block, dtype=q.data.dtype)
    scores = scale(matmul(q, transpose(k, (1, 0))), 1.0 / np.sqrt(d))
    probs = softmax_last(scores, bias=bias)
    return matmul(probs, v)
