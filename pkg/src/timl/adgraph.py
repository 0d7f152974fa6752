"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records its parents and a vector-Jacobian product written in terms
of other recorded ops, so gradients built with ``create_graph=True`` are
themselves differentiable. That is what the MAML outer update needs: the
adapted parameters contain a gradient, and the query loss is differentiated
through it.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "ParamSet",
    "Tape",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "grad",
    "finite_diff_check",
    "matmul",
    "add",
    "subtract",
    "multiply",
    "sigmoid",
    "tanh",
    "gelu",
    "concatenate",
    "mean",
    "sum",
    "group_norm",
    "bce_with_logits",
    "squared_error",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class _GradMode:
    enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = prev


class Tensor:
    """Dense n-d float64 value, optionally a node of the computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op", "_fwd", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"
        self._fwd = None

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
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return multiply(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp, fwd) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
        out._fwd = fwd
    return out


# ---------------------------------------------------------------------------
# structural helpers (used by the primitives' backward rules)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    shape = tuple(shape)
    fwd = lambda a: a.reshape(shape)
    return _record("reshape", fwd(x.data), (x,), (lambda g: reshape(g, old),), fwd)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    fwd = lambda a: a.T
    return _record("transpose", fwd(x.data), (x,), (transpose,), fwd)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    old = x.shape
    fwd = lambda a: np.broadcast_to(a, shape).copy()
    return _record("broadcast_to", fwd(x.data), (x,), (lambda g: _unbroadcast(g, old),), fwd)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    return reshape(sum(g, axis=axes), shape)


def _pad_slice(g: Tensor, shape: tuple[int, ...], index) -> Tensor:
    def fwd(a):
        out = np.zeros(shape)
        out[index] = a
        return out

    return _record("pad_slice", fwd(g.data), (g,), (lambda gg: slice_(gg, index),), fwd)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
        np.matmul,
    )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        np.add,
    )


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "subtract",
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
        np.subtract,
    )


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "multiply",
        a.data * b.data,
        (a, b),
        (lambda g: _unbroadcast(g * b, a.shape), lambda g: _unbroadcast(g * a, b.shape)),
        np.multiply,
    )


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    # numerically stable in both tails
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        s = sigmoid(x)
        return g * s * (1.0 - s)

    return _record("sigmoid", _sigmoid_np(x.data), (x,), (vjp,), _sigmoid_np)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        y = tanh(x)
        return g * (1.0 - y * y)

    return _record("tanh", np.tanh(x.data), (x,), (vjp,), np.tanh)


# GeLU and its derivatives as closed forms in terms of Phi and phi.
# Each level's derivative is the next level, so any finite order is exact.
def _gelu_level(k: int, a: np.ndarray) -> np.ndarray:
    if k == 0:
        return a * ndtr(a)
    pdf = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
    if k == 1:
        return ndtr(a) + a * pdf
    if k == 2:
        return pdf * (2.0 - a * a)
    if k == 3:
        return pdf * (a**3 - 4.0 * a)
    if k == 4:
        return pdf * (-(a**4) + 7.0 * a * a - 4.0)
    raise NotImplementedError("GeLU derivatives beyond fourth order")


def _gelu_op(x: Tensor, k: int) -> Tensor:
    fwd = lambda a: _gelu_level(k, a)
    return _record(
        "gelu" if k == 0 else f"gelu_d{k}",
        fwd(x.data),
        (x,),
        (lambda g: g * _gelu_op(x, k + 1),),
        fwd,
    )


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the standard-normal CDF."""
    return _gelu_op(_as_tensor(x), 0)


def concatenate(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    ndim = ts[0].ndim
    ax = axis % ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def piece(lo, hi):
        idx = [slice(None)] * ndim
        idx[ax] = slice(int(lo), int(hi))
        idx = tuple(idx)
        return lambda g: slice_(g, idx)

    vjps = tuple(piece(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]))
    fwd = lambda *arrs: np.concatenate(arrs, axis=ax)
    return _record("concatenate", fwd(*(t.data for t in ts)), ts, vjps, fwd)


def slice_(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    fwd = lambda a: np.array(a[index], dtype=np.float64)
    return _record("slice", fwd(x.data), (x,), (lambda g: _pad_slice(g, shape, index),), fwd)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(a % x.ndim for a in (axis if isinstance(axis, tuple) else (axis,)))
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    fwd = lambda a: np.sum(a, axis=axes, keepdims=keepdims)
    return _record("sum", fwd(x.data), (x,), (lambda g: broadcast_to(reshape(g, kept), shape),), fwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def _rsqrt(x: Tensor, power: float = -0.5) -> Tensor:
    # x ** power for power of the form -k - 1/2; derivative stays in the family
    fwd = lambda a: a**power
    return _record(
        "pow",
        fwd(x.data),
        (x,),
        (lambda g: g * _rsqrt(x, power - 1.0) * power,),
        fwd,
    )


def group_norm(x: Tensor, groups: int, eps: float, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize each group of channels of a (batch, channels) tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError("group_norm expects (batch, channels)")
    n, c = x.shape
    if groups <= 0 or c % groups:
        raise ValueError(f"{c} channels are not divisible into {groups} groups")
    g = reshape(x, (n, groups, c // groups))
    centered = g - mean(g, axis=2, keepdims=True)
    var = mean(centered * centered, axis=2, keepdims=True)
    normed = reshape(centered * _rsqrt(var + eps), (n, c))
    return normed * scale + shift


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits."""
    z = _as_tensor(logits)
    y = _as_tensor(targets)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ in shape")
    n = z.size

    def fwd(a, t):
        return np.mean(np.maximum(a, 0.0) - a * t + np.log1p(np.exp(-np.abs(a))))

    vjps = (
        lambda g: g * (sigmoid(z) - y) * (1.0 / n),
        lambda g: g * z * (-1.0 / n),
    )
    return _record("bce_with_logits", np.asarray(fwd(z.data, y.data)), (z, y), vjps, fwd)


def squared_error(pred: Tensor, target) -> Tensor:
    """Mean squared error."""
    p = _as_tensor(pred)
    t = _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} differ in shape")
    n = p.size

    vjps = (
        lambda g: g * (p - t) * (2.0 / n),
        lambda g: g * (t - p) * (2.0 / n),
    )
    fwd = lambda a, b: np.asarray(np.mean((a - b) ** 2))
    return _record("squared_error", fwd(p.data, t.data), (p, t), vjps, fwd)


# ---------------------------------------------------------------------------
# parameters and the tape


class ParamSet(Mapping[str, Tensor]):
    """Immutable named collection of tensors (learner or encoder weights)."""

    __slots__ = ("_items",)

    def __init__(self, items: Mapping[str, Tensor] | None = None, **kwargs: Tensor):
        merged = dict(items or {}, **kwargs)
        self._items = {k: _as_tensor(v) for k, v in merged.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> ParamSet:
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._items.items())
        return f"ParamSet({inner})"

    @property
    def num_params(self) -> int:
        return int(np.sum([t.size for t in self._items.values()]))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}

    def detached(self, requires_grad: bool = True) -> ParamSet:
        return ParamSet({k: Tensor(v.data.copy(), requires_grad) for k, v in self._items.items()})

    def replace(self, updates: Mapping[str, Tensor]) -> ParamSet:
        """New set with some entries swapped; names and shapes must match."""
        out = dict(self._items)
        for k, v in updates.items():
            if k not in out:
                raise KeyError(f"unknown parameter {k!r}")
            v = _as_tensor(v)
            if v.shape != out[k].shape:
                raise ValueError(f"shape of {k!r} is fixed at {out[k].shape}, got {v.shape}")
            out[k] = v
        return ParamSet(out)

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}{k}": v for k, v in self._items.items()}


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    fwd: Callable | None


@dataclass
class Tape:
    """Topologically ordered record of the ops leading to an output.

    Slots ``0..len(leaves)-1`` hold the leaf tensors; every node's inputs
    precede its output slot.
    """

    leaves: list[Tensor] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        tape = cls()
        slot: dict[int, int] = {}
        for t in order:
            if t.is_leaf:
                slot[id(t)] = len(tape.tensors)
                tape.leaves.append(t)
                tape.tensors.append(t)
        for t in order:
            if t.is_leaf:
                continue
            slot[id(t)] = len(tape.tensors)
            tape.tensors.append(t)
            tape.nodes.append(Node(t._op, tuple(slot[id(p)] for p in t._parents), slot[id(t)], t._fwd))
        return tape

    def replay(self) -> np.ndarray:
        """Recompute every forward value from the leaves; returns the output."""
        values: list[np.ndarray | None] = [None] * len(self.tensors)
        for i, leaf in enumerate(self.leaves):
            values[i] = leaf.data
        for node in self.nodes:
            values[node.output] = node.fwd(*(values[i] for i in node.inputs))
        return values[-1]


def grad(
    loss: Tensor,
    params: Mapping[str, Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> ParamSet:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``params``.

    With ``create_graph`` the returned gradients are recorded ops themselves,
    so a loss built from them can be differentiated again.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        if allow_unused:
            return ParamSet({k: Tensor(np.zeros_like(v.data)) for k, v in params.items()})
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.record(loss)
    index = {id(t): i for i, t in enumerate(tape.tensors)}
    missing = [k for k, v in params.items() if id(v) not in index]
    if missing and not allow_unused:
        raise ValueError(f"parameters not on the tape: {missing}")

    grads: dict[int, Tensor] = {len(tape.tensors) - 1: Tensor(np.ones_like(loss.data))}
    wanted = {index[id(v)] for v in params.values() if id(v) in index}
    # only slots with a wanted tensor upstream can carry a useful gradient
    live = [i in wanted for i in range(len(tape.leaves))]
    live += [False] * len(tape.nodes)
    for node in tape.nodes:
        live[node.output] = node.output in wanted or any(live[i] for i in node.inputs)
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(tape.nodes):
            g = grads.get(node.output) if node.output in wanted else grads.pop(node.output, None)
            if g is None or not live[node.output]:
                continue
            vjps = tape.tensors[node.output]._vjp
            for slot, vjp in zip(node.inputs, vjps):
                if not live[slot]:
                    continue
                pg = vjp(g)
                prev = grads.get(slot)
                grads[slot] = pg if prev is None else add(prev, pg)

    result = {}
    for k, v in params.items():
        g = grads.get(index.get(id(v), -2))
        result[k] = g if g is not None else Tensor(np.zeros_like(v.data))
    return ParamSet(result)


def finite_diff_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    floor: float | None = None,
) -> float:
    """Worst relative error between ``grad`` and central differences of ``f``.

    Per-coordinate error is ``|fd - an| / max(|fd|, |an|, floor)``. ``floor``
    defaults to 1e-3 of the largest gradient entry, so coordinates that are
    tiny compared with the rest are judged against the overall scale.
    """
    base = params.detached()
    analytic = grad(f(base), base, allow_unused=True)
    an_all, fd_all = [], []
    # no no_grad() here: f may itself take gradients (meta-losses)
    for name, t in base.items():
        flat = t.data.reshape(-1)
        an = analytic[name].data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(base).item()
            flat[i] = orig - h
            down = f(base).item()
            flat[i] = orig
            fd_all.append((up - down) / (2.0 * h))
            an_all.append(an[i])
    fd = np.asarray(fd_all)
    an = np.asarray(an_all)
    if floor is None:
        floor = max(1e-3 * float(np.max(np.abs(np.concatenate([fd, an])), initial=0.0)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)
    return float(np.max(np.abs(fd - an) / denom, initial=0.0))
