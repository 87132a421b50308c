"""Dense float tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record to the active :class:`Tape`.
``backward(loss)`` walks those records once, in reverse, accumulating
gradients into leaf tensors created with ``requires_grad=True``.

Broadcasting is deliberately narrow: two tensors must share a shape, except
for a bias row (shape ``(n,)`` or ``(1, n)``) added along the last axis.
Non-differentiable constants (python scalars, numpy arrays) may broadcast
freely against a tensor.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (detached loss, double backward)."""


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)
    consumed: bool = False


class _State:
    tape = Tape()
    enabled = True


def current_tape() -> Tape:
    return _State.tape


def reset_tape() -> Tape:
    """Start a fresh tape; records on the old one become unreachable."""
    _State.tape = Tape()
    return _State.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _State.enabled
    _State.enabled = False
    try:
        yield
    finally:
        _State.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _op(name: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    needs = _State.enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _State.tape
        out._tape = tape
        out._index = len(tape.records)
        tape.records.append(_Record(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise TapeError("loss is detached from any recorded computation")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; reset_tape() and recompute")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.dtype != t.data.dtype:
                gi = gi.astype(t.data.dtype)
            if t._tape is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    if _State.tape is tape:
        _State.tape = Tape()


# ---------------------------------------------------------------- elementwise


def _const(x, like: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=like.dtype)


def _is_bias(big: Tensor, small: Tensor) -> bool:
    n = big.shape[-1] if big.ndim else None
    return small.ndim in (1, 2) and small.size == n and small.shape[-1] == n and big.ndim >= 1


def _reduce_bias(g: np.ndarray, shape: tuple) -> np.ndarray:
    n = shape[-1]
    return g.reshape(-1, n).sum(axis=0, dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = _const(b, a.data)
        out = a.data + c
        if out.shape != a.shape:
            raise ShapeError(f"constant of shape {c.shape} would broadcast {a.shape} to {out.shape}")
        return _op("add_const", out, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _op("add", a.data + b.data, (a, b), lambda g: (g, g))
    if _is_bias(a, b):
        return _op("add_bias", a.data + b.data.reshape(-1), (a, b), lambda g: (g, _reduce_bias(g, b.shape)))
    if _is_bias(b, a):
        return _op("add_bias", b.data + a.data.reshape(-1), (a, b), lambda g: (_reduce_bias(g, a.shape), g))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    if a.shape == b.shape:
        return _op("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    if _is_bias(a, b):
        return _op("sub_bias", a.data - b.data.reshape(-1), (a, b), lambda g: (g, -_reduce_bias(g, b.shape)))
    raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = _const(b, a.data)
        out = a.data * c
        if out.shape != a.shape:
            raise ShapeError(f"constant of shape {c.shape} would broadcast {a.shape} to {out.shape}")
        return _op("mul_const", out, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, so a diverged loss is not silently clipped to 0
    return _op("relu", np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _op("gelu", out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def bw(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

        return _op("matmul", ad @ bd, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")

    def bwb(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _op("bmatmul", ad @ bd, (a, b), bwb)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _op("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
               lambda g: tuple(np.split(g, cuts, axis=ax)))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _op("getitem", x.data[idx], (x,), bw)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _op("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _op("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - _logsumexp(x.data, axis)
    s = np.exp(out)
    return _op("log_softmax", out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under row-wise softmax of ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match {n} rows")
    lse = _logsumexp(logits.data.astype(np.float64), 1)[:, 0]
    nll = lse - logits.data[np.arange(n), t]
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logits.data - lse[:, None].astype(logits.dtype))
        p[np.arange(n), t] -= 1.0
        return (p * (g * scale),)

    return _op("cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------- model blocks


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _op("embedding", table.data[ids], (table,), bw)


def mean_pool(x: Tensor, mask) -> Tensor:
    """Average ``x`` of shape ``(B, L, d)`` over positions where ``mask`` is 1."""
    m = np.asarray(mask, dtype=x.dtype)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError(f"mean_pool: x {x.shape} and mask {m.shape} disagree")
    count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    w = (m / count)[:, :, None]
    out = (x.data * w).sum(axis=1, dtype=np.float64).astype(x.dtype)
    return _op("mean_pool", out, (x,), lambda g: (g[:, None, :] * w,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape not in ((d,), (1, d)) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data.reshape(-1)
    out = xhat * gm + beta.data.reshape(-1)

    def bw(g):
        gx_hat = g * gm
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0, dtype=np.float64).reshape(gamma.shape)
        gb = g.reshape(-1, d).sum(axis=0, dtype=np.float64).reshape(beta.shape)
        return gx, gg, gb

    return _op("layer_norm", out, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | int | None = None) -> Tensor:
    if rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine of two ``(n, d)`` tensors.

    A zero row on either side yields similarity 0 with zero gradient.
    """
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"cosine_similarity expects equal (n, d) shapes, got {a.shape} and {b.shape}")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    ok = (na != 0) & (nb != 0)  # NaN rows stay NaN so divergence is visible
    denom = np.where(ok, na * nb, 1.0)
    dot = (ad * bd).sum(axis=1)
    cos = np.where(ok, dot / denom, 0.0)

    def bw(g):
        g64 = np.where(ok, g.astype(np.float64), 0.0)[:, None]
        na_ = np.where(ok, na, 1.0)[:, None]
        nb_ = np.where(ok, nb, 1.0)[:, None]
        c = cos[:, None]
        ga = g64 * (bd / (na_ * nb_) - c * ad / (na_ * na_))
        gb = g64 * (ad / (na_ * nb_) - c * bd / (nb_ * nb_))
        return ga, gb

    return _op("cosine", cos.astype(a.dtype), (a, b), bw)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    per_input: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-6, tol: float = 1e-4,
               seed: int = 0, floor: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences in float64.

    Non-scalar outputs are contracted with fixed random weights drawn from
    ``seed``. Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    weights: list[np.ndarray] = []

    def scalar(*ts):
        out = f(*ts)
        if out.size == 1:
            return out.reshape(())
        if not weights:
            weights.append(np.random.default_rng(seed).standard_normal(out.shape))
        return sum_(mul(out, weights[0]))

    reset_tape()
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(scalar(*leaves))
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    per_input, max_abs = [], 0.0
    with no_grad():
        for i, base in enumerate(arrays):
            worst = 0.0
            num = np.zeros_like(base)
            for j in range(base.size):
                vals = []
                for step in (eps, -eps):
                    pert = [a.copy() for a in arrays]
                    pert[i].reshape(-1)[j] += step
                    vals.append(float(scalar(*[Tensor(p) for p in pert]).data))
                num.reshape(-1)[j] = (vals[0] - vals[1]) / (2 * eps)
            diff = np.abs(analytic[i] - num)
            denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(num)), floor)
            if diff.size:
                worst = float((diff / denom).max())
                max_abs = max(max_abs, float(diff.max()))
            per_input.append(worst)
    return GradCheckReport(max(per_input, default=0.0), max_abs, per_input, tol)
