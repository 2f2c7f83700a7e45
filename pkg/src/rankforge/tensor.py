"""Dense float64 tensors with a dynamic reverse-mode differentiation tape.

Operations record themselves on the active :class:`Tape` (entered with
``with Tape() as tape:``) only when at least one input requires a gradient.
Outside a tape every op is a plain numpy computation, which is what inference
and finite-difference evaluation use.
"""

from __future__ import annotations

import builtins
import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered list of recorded operations; inputs always precede outputs."""

    def __init__(self):
        self.records: list[_Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None

    def _register(self, t: Tensor) -> int:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._leaves[t.node_id] = t
        return t.node_id

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        for t in inputs:
            self._register(t)
        output._tape = self
        output.node_id = self._next_id
        self._next_id += 1
        self.records.append(_Record(tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(inputs, out, backward)
        return out
    return Tensor(data)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across any leading batch axes of ``a``) or has
    exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = np.matmul(xd, wd.T)
    if bias is not None:
        out = out + bias.data
    n_in, n_out = wd.shape[1], wd.shape[0]

    def backward(g):
        gx = np.matmul(g, wd) if x.requires_grad else None
        gw = g.reshape(-1, n_out).T @ xd.reshape(-1, n_in) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, n_out).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        a = _as_tensor(a)
        return _result(a.data + c, (a,), lambda g: (g,))
    a = _as_tensor(a)
    _broadcast_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = _as_tensor(a)
    _broadcast_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    a = _as_tensor(a)
    _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _result(ad * bd, (a, b), lambda g: (_sum_to(g * bd, sa), _sum_to(g * ad, sb)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_approx(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name over the elementwise ops."""
    table = {"add": add, "mul": mul, "relu": relu, "gelu_approx": gelu_approx, "tanh": tanh, "scale": scale}
    if kind not in table:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array broadcastable to ``x`` (no gradient flows into it)."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    if out.shape != x.shape:
        raise DimensionError(f"add_const: constant {c.shape} would broadcast {x.shape} to {out.shape}")
    return _result(out, (x,), lambda g: (g,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x`` (masks, per-row scales)."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data * c
    if out.shape != x.shape:
        raise DimensionError(f"mul_const: constant {c.shape} would broadcast {x.shape} to {out.shape}")
    return _result(out, (x,), lambda g: (g * c,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul_const(x, keep)


# --------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit width {h}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, h).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, h).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    y = xd / safe
    big = norm > eps

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / safe, g / eps),)

    return _result(y, (x,), backward)


# --------------------------------------------------------------------------
# reductions


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def reduce(kind: str, x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max along one axis (or over everything when ``axis`` is None).

    Max routes the gradient to the lowest index among tied maxima.
    """
    xd = x.data
    if axis is None:
        flat = reduce(kind, reshape(x, (-1,)) if x.ndim != 1 else x, 0)
        return reshape(flat, (1,) * x.ndim) if keepdims else flat
    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    if n == 0:
        raise DimensionError(f"reduce {kind} over empty axis {axis} of shape {x.shape}")
    shape = x.shape

    if kind == "sum":
        out = xd.sum(axis=ax, keepdims=keepdims)

        def backward(g):
            g = g if keepdims else np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)

    elif kind == "mean":
        out = xd.mean(axis=ax, keepdims=keepdims)

        def backward(g):
            g = g if keepdims else np.expand_dims(g, ax)
            return (np.broadcast_to(g / n, shape).copy(),)

    elif kind == "max":
        idx = np.expand_dims(xd.argmax(axis=ax), ax)
        out = np.take_along_axis(xd, idx, axis=ax)
        if not keepdims:
            out = np.squeeze(out, ax)

        def backward(g):
            g = g if keepdims else np.expand_dims(g, ax)
            gx = np.zeros(shape)
            np.put_along_axis(gx, idx, g, axis=ax)
            return (gx,)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return _result(np.asarray(out), (x,), backward)


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("max", x, axis, keepdims)


# --------------------------------------------------------------------------
# shape manipulation and indexing


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index) -> Tensor:
    """numpy-style indexing; repeated indices accumulate in the backward pass."""
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(x.data[index]), (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids out of range for table {table.shape}")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in xs], axis=axis)
    ax = axis % out.ndim
    return _result(out, tuple(xs), lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(xs))))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=ax)))


# --------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf on the tape.

    Leaves that require a gradient but are not reachable from ``loss`` get a
    zero buffer.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not recorded on the given tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
    for node_id, t in tape._leaves.items():
        if not t.requires_grad:
            continue
        g = grads.get(node_id)
        if t.grad is None:
            t.grad = np.zeros(t.shape)
        if g is not None:
            t.grad = t.grad + g


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      report: dict | None = None, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare backward() against central differences.

    ``f`` takes no arguments and must read ``params`` through their ``data``
    buffers. Returns max |g_ad - g_fd| / max(floor, |g_ad| + |g_fd|), where
    floor = 1e4 * eps * max(1, |loss|) / h: a central difference cannot
    resolve a gradient below its rounding noise, so exact zeros (a bias that
    cancels between paired scores, say) are not reported as error. When
    ``report`` is given it receives the worst coordinate per parameter.
    ``max_coords`` caps the coordinates probed per parameter (a random
    subset drawn from ``rng``); by default every coordinate is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if loss._tape is tape:  # a loss that never touches params leaves nothing to differentiate
        backward(loss, tape)
    floor = 1e4 * np.finfo(np.float64).eps * builtins.max(1.0, abs(float(loss.data.reshape(-1)[0]))) / h
    worst = 0.0
    for i, p in enumerate(params):
        g_ad = p.grad if p.grad is not None else np.zeros(p.shape)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        g_fd = np.empty(coords.size)
        for n, j in enumerate(coords.tolist()):
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data.reshape(-1)[0])
            flat[j] = orig - h
            down = float(f().data.reshape(-1)[0])
            flat[j] = orig
            g_fd[n] = (up - down) / (2.0 * h)
        ga = g_ad.reshape(-1)[coords]
        rel = np.abs(ga - g_fd) / np.maximum(floor, np.abs(ga) + np.abs(g_fd))
        if rel.size:
            k = int(rel.argmax())
            worst = builtins.max(worst, float(rel[k]))
            if report is not None:
                report[p.name or f"param{i}"] = (float(rel[k]), float(ga[k]), float(g_fd[k]))
    return worst

