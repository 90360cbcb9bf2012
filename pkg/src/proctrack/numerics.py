"""Tape-based reverse-mode autodiff over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``backward`` walks the recorded nodes once, in reverse, accumulating
vector-Jacobian products. Outside a tape the same functions simply compute
values, which is what inference uses.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (w * w).sum()
    >>> backward(tape, y)[w]
    array([4.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64
# Additive attention mask for padding keys; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """Dense array plus an optional autodiff handle.

    Hashing is by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "node_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__
    # make ``ndarray + Tensor`` defer to Tensor.__radd__
    __array_ufunc__ = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_not_scalar(t: Tensor):
    raise ShapeError("item", f"expected a single element, got shape {list(t.shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations. Single use."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape already consumed by backward; tapes are single-use")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, vjp))


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def apply(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a computed value as an op output and record it on the active tape.

    ``vjp(g)`` must return one gradient (or None) per input. This is also the
    extension point for defining new differentiable ops.
    """
    inputs = tuple(inputs)
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, vjp)
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse pass. Returns gradients for ``wrt`` (default: every leaf seen).

    Tensors in ``wrt`` with no path to the loss get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {list(loss.shape)}")
    if tape.consumed:
        raise RuntimeError("tape already consumed")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.vjp(g)
        for inp, gi in zip(node.inputs, parts):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(node.op, f"gradient shape {list(gi.shape)} != input shape {list(inp.shape)}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.node_id is None or inp.node_id >= len(tape.nodes) or tape.nodes[inp.node_id].output is not inp:
                leaves[key] = inp

    targets = list(wrt) if wrt is not None else list(leaves.values())
    if wrt is None and loss.requires_grad and loss.node_id is None:
        targets.append(loss)
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


# ---------------------------------------------------------------------------
# shape helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {list(a.shape)} with {list(b.shape)}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return apply("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return apply("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply("mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return apply("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return apply("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return apply("log", np.log(x), (a,), lambda g: (g / x,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return apply("gelu", y, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", "operands must be at least 1-d")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError("matmul", f"inner dims differ: {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # stacked rows times a weight matrix: one 2-d product
        lead = ad.shape[:-1]
        a2d = ad.reshape(-1, ka)
        out = (a2d @ bd).reshape(lead + (bd.shape[1],))

        def vjp_rows(g):
            g2d = g.reshape(-1, bd.shape[1])
            return (g2d @ bd.T).reshape(ad.shape), a2d.T @ g2d

        return apply("matmul", out, (a, b), vjp_rows)
    out = ad @ bd

    def vjp(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return apply("matmul", out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {list(src)} to {list(shape)}") from None
    return apply("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", f"incompatible shapes {[list(x.shape) for x in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return apply("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing (slice op)."""
    src = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", f"{exc} on shape {list(src)}") from None
    out = np.array(out, dtype=DTYPE)

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return apply("slice", out, (a,), vjp)


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-d table selected by an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-d, got {list(table.shape)}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"ids out of range [0, {table.shape[0]})")
    src = table.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return apply("embedding", table.data[ids], (table,), vjp)


# ---------------------------------------------------------------------------
# reductions and normalisers


def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return apply("sum", np.asarray(out, dtype=DTYPE), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(count))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = np.squeeze(out_k, axis=axis)

    def vjp(g):
        p = np.exp(x - out_k)
        return (np.expand_dims(g, axis) * p,)

    return apply("logsumexp", out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply("softmax", y, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return apply("log_softmax", y, (a,), vjp)


def cross_entropy(logits: Tensor, targets, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of integer targets under softmax(logits) rows."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if x.ndim == 1:
        x = x[None, :]
        targets = targets.reshape(1)
    if targets.shape != x.shape[:-1]:
        raise ShapeError("cross_entropy", f"targets {list(targets.shape)} vs logits {list(logits.shape)}")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[-1]):
        raise ShapeError("cross_entropy", f"target out of range [0, {x.shape[-1]})")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(targets.size)
    flat_logp = logp.reshape(-1, x.shape[-1])
    picked = flat_logp[rows, targets.reshape(-1)]
    total = -picked.sum()
    denom = 1.0 if reduction == "sum" else float(max(targets.size, 1))
    src = logits.shape

    def vjp(g):
        grad = np.exp(flat_logp)
        grad[rows, targets.reshape(-1)] -= 1.0
        return ((grad * (float(g) / denom)).reshape(src),)

    return apply("cross_entropy", np.asarray(total / denom), (logits,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    if gd.shape != (xd.shape[-1],) or bd.shape != (xd.shape[-1],):
        raise ShapeError("layer_norm", f"gain/bias must be [{xd.shape[-1]}]")
    out = xhat * gd + bd

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return apply("layer_norm", out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# randomness and initialisation


def make_rng(seed: int) -> np.random.Generator:
    """Single PRNG entry point (PCG64); every random draw flows from here."""
    return np.random.Generator(np.random.PCG64(int(seed)))


INIT_SCALE = 0.08


def uniform_param(rng: np.random.Generator, shape, name: str | None = None) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=tuple(shape)), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


# Gradient magnitude above which relative error is reported.
REL_FLOOR = 1e-4


@dataclass
class GradcheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int
    ok: bool
    worst_index: tuple[int, ...] | None = None


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]
    tolerance: float
    abs_tolerance: float
    ok: bool
    failure: str | None = None

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "tolerance": self.tolerance,
            "abs_tolerance": self.abs_tolerance,
            "max_rel_err": self.max_rel_err,
            "failure": self.failure,
            "params": [
                {
                    "name": e.name,
                    "max_rel_err": e.max_rel_err,
                    "max_abs_err": e.max_abs_err,
                    "checked": e.checked,
                    "ok": e.ok,
                }
                for e in self.entries
            ],
        }


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-4,
    abs_tolerance: float = 1e-6,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
) -> GradcheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` closes over ``params`` and is re-evaluated after in-place
    perturbation of their data. An entry passes if its absolute error is
    below ``abs_tolerance`` (the fallback where relative error is undefined)
    or its relative error is below ``tolerance``. ``max_entries`` samples a
    subset of coordinates per parameter.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    with Tape() as tape:
        out = f()
    if not np.all(np.isfinite(out.data)):
        return GradcheckReport([], tolerance, abs_tolerance, False, "non-finite value at the evaluation point")
    analytic = backward(tape, out, wrt=params)

    rng = rng or make_rng(0)
    entries = []
    failure = None
    for name, p in zip(names, params):
        ga = analytic[p]
        flat_idx = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            flat_idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        worst_rel, worst_abs, worst_at, ok = 0.0, 0.0, None, True
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = f().data
            p.data[idx] = orig - h
            fm = f().data
            p.data[idx] = orig
            numeric = float((fp - fm) / (2 * h))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failure = f"non-finite value perturbing {name}{tuple(int(i) for i in idx)}"
                ok = False
                break
            a = float(ga[idx])
            abs_err = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel_err = abs_err / denom if denom > 0 else 0.0
            entry_ok = abs_err <= abs_tolerance or rel_err <= tolerance
            if not entry_ok:
                ok = False
            # below REL_FLOOR the finite difference is dominated by rounding
            if denom >= REL_FLOOR and rel_err > worst_rel:
                worst_rel, worst_at = rel_err, tuple(int(i) for i in idx)
            worst_abs = max(worst_abs, abs_err)
        entries.append(GradcheckEntry(name, worst_rel, worst_abs, len(flat_idx), ok, worst_at))
        if failure:
            break
    all_ok = failure is None and all(e.ok for e in entries)
    return GradcheckReport(entries, tolerance, abs_tolerance, all_ok, failure)


def check_finite(value: Tensor | np.ndarray, where: str) -> None:
    data = value.data if isinstance(value, Tensor) else value
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value at {where}")
