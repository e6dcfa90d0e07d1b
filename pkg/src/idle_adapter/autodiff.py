"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation builds a new :class:`Tensor` whose ``_node`` remembers its
inputs and a local backward rule. :func:`backward` linearises the reachable
graph into a :class:`Tape` (topological order) and walks it once in reverse.

Elementwise operations require identical shapes. Broadcasting only happens
through the explicit :func:`repeat` and :func:`broadcast_to` operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev


@dataclass
class _Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other): return add(self, _lift(other, self))
    def __radd__(self, other): return add(_lift(other, self), self)
    def __sub__(self, other): return sub(self, _lift(other, self))
    def __rsub__(self, other): return sub(_lift(other, self), self)
    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)
    def __rmul__(self, other): return self.__mul__(other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _raise_not_scalar(shape):
    raise ValueError(f"expected a single-element tensor, got shape {shape}")


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.data.dtype)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape)
    return Tensor(arr)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._node = None
    needs = _GradMode.enabled and any(t.requires_grad or t._node is not None for t in inputs)
    out.requires_grad = False
    if needs:
        out._node = _Node(op, inputs, rule)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use repeat/broadcast_to)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form: never overflows, never produces NaN
    pos = x >= 0
    z = np.exp(-np.abs(x))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth, so finite differences behave)."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, "gelu", (a,), rule)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), rule)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape).copy(), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
                 lambda g: (g.transpose(inv),))


def repeat(a: Tensor, n: int, axis: int = 0) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new axis inserted at ``axis``."""
    if n < 0:
        raise ValueError("repeat count must be non-negative")
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _make(out, "repeat", (a,), lambda g: (g.sum(axis=axis),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc

    def rule(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, "broadcast_to", (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape
    out = np.array(a.data[index], copy=True)

    def rule(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, "getitem", (a,), rule)


def take(table: Tensor, indices) -> Tensor:
    """Row lookup: ``table[indices]`` for a 2-D table and an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take expects a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    rows = table.shape

    def rule(g):
        full = np.zeros(rows, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return _make(table.data[idx], "take", (table,), rule)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        ad @ bd, "matmul", (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def rule(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gain, bias), rule)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Operations reachable from a root, in execution (topological) order."""

    entries: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._node.inputs:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    Calling twice without :func:`zero_grad` adds the gradients again.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if not tape.entries:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t._node.inputs, t._node.backward(g)):
            if pg is None:
                continue
            if parent._node is not None:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
            elif parent.requires_grad:
                parent.grad = parent.grad + pg
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float | None
    rel_error: float
    frozen: bool = False


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_error(self) -> float:
        errs = [e.rel_error for e in self.entries if not e.frozen]
        return max(errs) if errs else 0.0

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.frozen and e.rel_error > self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures


class NonDeterministicError(RuntimeError):
    pass


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` is re-evaluated from scratch each call and must return a scalar.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Frozen tensors
    (``requires_grad=False``) are reported with their zero gradient and skipped.
    ``max_entries`` caps the number of probed entries per tensor (random subset).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    again = f()
    if not np.array_equal(loss.data, again.data):
        raise NonDeterministicError("f returned different values for identical parameters")
    backward(loss)

    entries: list[GradCheckEntry] = []
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        if not p.requires_grad:
            entries.append(GradCheckEntry(name, (), 0.0, None, 0.0, frozen=True))
            continue
        analytic = p.grad.copy()
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_entries, replace=False)
        original = p.data
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), p.shape)
            plus = original.copy()
            plus[idx] += h
            p.data = plus
            fp = float(f().data)
            minus = original.copy()
            minus[idx] -= h
            p.data = minus
            fm = float(f().data)
            p.data = original
            num = (fp - fm) / (2 * h)
            a = float(analytic[idx])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            entries.append(GradCheckEntry(name, tuple(int(i) for i in idx), a, num, rel))
    return GradCheckReport(entries, tol)
