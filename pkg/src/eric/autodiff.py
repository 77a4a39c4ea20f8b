"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each :class:`Tensor` wraps a numpy array and, when produced by an op with at
least one grad-requiring input, remembers its parents and a backward rule.
:func:`backward` orders the reachable graph topologically into a :class:`Tape`
and replays it in reverse, accumulating gradients additively.

Only the operations the model needs are provided. Broadcasting is limited to
what numpy does for elementwise ops (gradients are reduced back to the input
shape) and to batched matmul against a 2-D weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e30
NORM_EPS = 1e-8
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class DegenerateNormError(ValueError):
    pass


class MaskError(ValueError):
    pass


class SpanError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward


@dataclass
class TapeNode:
    output: Tensor
    inputs: tuple[Tensor, ...]


@dataclass
class Tape:
    """Topologically ordered record of the ops reachable from a loss."""

    nodes: list[TapeNode] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        return cls([TapeNode(t, t._parents) for t in order if t._backward is not None])

    def ids(self) -> list[int]:
        return [id(n.output) for n in self.nodes]


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(node.inputs, out._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                # leaf: accumulate into .grad
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd  # explicit products: float ** is far slower in numpy
    th = x2 * 0.044715
    th += 1.0
    th *= xd
    th *= c
    np.tanh(th, out=th)
    out = th + 1.0
    out *= 0.5
    out *= xd

    def bw(g):
        du = x2 * (3 * 0.044715 * c)
        du += c
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= du
        sech2 *= xd
        sech2 += th
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-D weight, computed as one flat matrix product."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine shapes do not match: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    out_shape = x.shape[:-1] + (w.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y.reshape(out_shape), parents, bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def take_rows(x: Tensor, index) -> Tensor:
    """``x[index]`` along axis 0 (gather); repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def embedding(table: Tensor, ids, frozen_rows: Sequence[int] = ()) -> Tensor:
    """Row lookup into ``table``; rows in ``frozen_rows`` never receive gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    frozen = np.asarray(list(frozen_rows), dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        if frozen.size:
            out[frozen] = 0.0
        return (out,)

    return _make(table.data[ids], (table,), bw)


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def mean_pool(x: Tensor, start: int, end: int) -> Tensor:
    """Arithmetic mean of rows ``x[start:end]`` of a 2-D tensor."""
    if not 0 <= start < end <= x.shape[0]:
        raise SpanError(f"empty or out-of-range span [{start}, {end}) for {x.shape[0]} rows")
    n = end - start

    def bw(g):
        out = np.zeros_like(x.data)
        out[start:end] = g / n
        return (out,)

    return _make(x.data[start:end].mean(axis=0), (x,), bw)


# ---------------------------------------------------------------------------
# normalizations and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Project each vector along the last axis onto the unit sphere."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateNormError("cannot normalize a vector with near-zero norm")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs a feature dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw)


def cross_entropy(logits: Tensor, target, weight=None) -> Tensor:
    """Mean negative log-likelihood of integer targets along the last axis.

    ``weight`` (same shape as ``target``) masks positions out with 0; the mean
    is taken over the total weight. A single 1-D logits vector with a scalar
    target gives the plain ``-log softmax(logits)[target]``.
    """
    target = np.asarray(target, dtype=np.int64)
    n = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= n):
        raise IndexError(f"target index out of range for {n} classes")
    w = np.ones(target.shape) if weight is None else np.asarray(weight, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy has no unmasked positions")
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[..., None],
                          np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / total * g)[..., None],)

    return _make(np.asarray(loss), (logits,), bw)


def straight_through(inp: Tensor, quantized: Tensor) -> Tensor:
    """Forward the quantized value; copy the upstream gradient to ``inp``.

    ``quantized`` gets no gradient through this op.
    """
    if inp.shape != quantized.shape:
        raise ShapeError(f"straight_through shapes differ: {inp.shape} vs {quantized.shape}")
    return _make(quantized.data.copy(), (inp, quantized), lambda g: (g, None))


# ---------------------------------------------------------------------------
# attention


def mask_bias(mask) -> np.ndarray:
    """Additive logits for a boolean attention mask (0 where allowed, MASK_VALUE elsewhere)."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise MaskError("an attention query has no unmasked key")
    return np.where(mask, 0.0, MASK_VALUE)


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) over the last axis; masked keys get MASK_VALUE logits.

    ``mask`` is either boolean (True = may attend) or an additive float bias
    from :func:`mask_bias`, which lets callers reuse one bias across layers.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask)
        scores = scores + (mask_bias(mask) if mask.dtype == bool else mask)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    y = scores

    def bw(g):
        gs = y * (g - (g * y).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = _unbroadcast(gs @ k.data, q.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        return gq, gk

    return _make(y, (q, k), bw)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    x = reshape(x, (*lead, t, heads, d // heads))
    n = len(lead)
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(x, (*lead, t, h * dh))


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int,
                     out_proj: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over already-projected q, k, v.

    ``mask[..., i, j]`` is True when query i may attend to key j. Heads are
    split from the last axis, attended independently and concatenated; the
    optional ``out_proj`` maps the concatenation back to the model width.
    """
    if q.shape[-1] % heads:
        raise ShapeError(f"width {q.shape[-1]} is not divisible by {heads} heads")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    m = None
    if mask is not None:
        m = np.expand_dims(np.asarray(mask), axis=-3)  # broadcast over heads
    w = attention_weights(qh, kh, m)
    out = merge_heads(matmul(w, vh))
    return out if out_proj is None else matmul(out, out_proj)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                   index: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    idx = list(np.ndindex(x.shape)) if index is None else index
    for i in idx:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)
