"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the upstream gradient to one gradient per input.
Gradients accumulate (``+=``) so a tensor consumed on several paths receives
the sum of all path contributions.

Broadcasting is deliberately absent: elementwise ops need identical shapes,
with the single exception of a 0-d tensor or Python scalar times a tensor.
Ops that do need a shape change (bias rows, framing) are explicit primitives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphError, NumericalError, ShapeError

NORM_EPS = 1e-12


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("values", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _node(a.values - b.values, (a, b), lambda g: (g, -g), "subtract")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a 0-d operand scales the other."""
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:
        av, bv = a.values, b.values
        return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "multiply")
    if a.values.ndim == 0:
        a, b = b, a
    if b.values.ndim != 0:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values

    def back(g):
        return g * bv, np.asarray(np.sum(g * av))

    return _node(av * bv, (a, b), back, "multiply")


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.values * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    v = x.values
    return _node(v * v, (x,), lambda g: (2.0 * v * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.values < 0):
        raise NumericalError("op 'sqrt' received negative input")
    out_v = np.sqrt(x.values)

    def back(g):
        return (np.divide(0.5 * g, out_v, out=np.zeros_like(g), where=out_v > 0),)

    return _node(out_v, (x,), back, "sqrt")


def tanh(x: Tensor) -> Tensor:
    out_v = np.tanh(x.values)
    return _node(out_v, (x,), lambda g: (g * (1.0 - out_v * out_v),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out_v = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _node(out_v, (x,), lambda g: (g * out_v * (1.0 - out_v),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def divide(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """``a / max(b, eps)`` elementwise; meant for non-negative denominators."""
    a, b = _lift(a), _lift(b)
    _same_shape("divide", a, b)
    den = np.maximum(b.values, eps)
    out_v = a.values / den
    live = b.values >= eps

    def back(g):
        return g / den, np.where(live, -g * out_v / den, 0.0)

    return _node(out_v, (a, b), back, "divide")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., n, k) @ (k, m)``; leading axes of ``a`` act as a batch."""
    if a.values.ndim < 2 or b.values.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values
    k, m = bv.shape

    def back(g):
        ga = g @ bv.T
        gb = av.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _node(av @ bv, (a, b), back, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-m vector to every row of an ``(..., m)`` tensor."""
    if bias.values.ndim != 1 or x.shape[-1:] != bias.shape:
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape} are incompatible")
    axes = tuple(range(x.values.ndim - 1))
    return _node(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=axes)), "add_bias")


def dot(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("dot", a, b)
    av, bv = a.values, b.values
    return _node(np.asarray(np.sum(av * bv)), (a, b), lambda g: (g * bv, g * av), "dot")


# -- reductions --------------------------------------------------------------

def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (0-d result) or along one axis."""
    shape = x.shape
    if axis is None:
        return _node(np.asarray(np.sum(x.values)), (x,), lambda g: (np.full(shape, float(g)),), "sum")
    ax = axis % x.values.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _node(np.sum(x.values, axis=ax), (x,), back, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def norm(x: Tensor, axis: int | None = None) -> Tensor:
    """L2 norm; gradient uses ``x / max(norm, 1e-12)`` so a zero input gets zero."""
    sq = np.sum(x.values * x.values, axis=axis)
    out_v = np.sqrt(np.asarray(sq))
    xv = x.values

    def back(g):
        den = np.maximum(out_v, NORM_EPS)
        if axis is None:
            return (xv * (g / den),)
        return (xv * np.expand_dims(g / den, axis),)

    return _node(out_v, (x,), back, "norm")


# -- structural --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concatenate: empty input list")
    ndim = tensors[0].values.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        other = [d for i, d in enumerate(t.shape) if i != ax]
        first = [d for i, d in enumerate(tensors[0].shape) if i != ax]
        if t.values.ndim != ndim or other != first:
            raise ShapeError(f"concatenate: shapes {tensors[0].shape} and {t.shape} are incompatible")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.values for t in tensors], axis=ax), tuple(tensors), back, "concatenate")


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; ``index`` is anything numpy's ``[]`` accepts as a view."""
    out_v = x.values[index]
    if not np.shares_memory(out_v, x.values) and out_v.size:
        raise ShapeError(f"slice: index {index!r} is not a basic slice of shape {x.shape}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _node(np.array(out_v), (x,), back, "slice")


def branch_mean(branches: Sequence[Tensor]) -> Tensor:
    """Parameter-free average of J same-shape tensors; each branch gets ``g / J`` back."""
    if len(branches) == 0:
        raise ShapeError("branch_mean: empty branch list")
    for b in branches[1:]:
        _same_shape("branch_mean", branches[0], b)
    j = len(branches)
    if j == 1:
        return _node(branches[0].values.copy(), tuple(branches), lambda g: (g,), "branch_mean")
    total = np.sum([b.values for b in branches], axis=0) / j
    return _node(total, tuple(branches), lambda g: (g / j,) * j, "branch_mean")


def frame_signal(x: Tensor, length: int, hop: int) -> Tensor:
    """Cut ``(..., N)`` into ``(..., T, length)`` frames starting every ``hop`` samples."""
    n = x.shape[-1]
    if n < length:
        raise ShapeError(f"frame: signal of {n} samples is shorter than one frame ({length})")
    frames = np.lib.stride_tricks.sliding_window_view(x.values, length, axis=-1)[..., ::hop, :]
    return _node(np.ascontiguousarray(frames), (x,), lambda g: (_overlap_add(g, hop, n),), "frame")


def overlap_add(frames: Tensor, hop: int, length: int) -> Tensor:
    """Adjoint of :func:`frame_signal`: sum frames back into a ``(..., length)`` signal."""
    t, size = frames.shape[-2:]
    needed = (t - 1) * hop + size
    if needed > length:
        raise ShapeError(f"overlap_add: {t} frames need {needed} samples, got length {length}")

    def back(g):
        return (np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(g, size, axis=-1)[..., ::hop, :][..., :t, :]),)

    return _node(_overlap_add(frames.values, hop, length), (frames,), back, "overlap_add")


def _overlap_add(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    *lead, t, size = frames.shape
    out = np.zeros((*lead, length))
    if size % hop == 0 and length % hop == 0:
        r = size // hop
        blocks = out.reshape(*lead, length // hop, hop)
        parts = frames.reshape(*lead, t, r, hop)
        for i in range(r):
            blocks[..., i:i + t, :] += parts[..., i, :]
        return out
    for k in range(t):
        out[..., k * hop:k * hop + size] += frames[..., k, :]
    return out


def rnn_scan(x: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Vanilla tanh recurrence ``h_t = tanh(x_t W + h_{t-1} U + b)`` over axis -2.

    ``x`` is ``(B, T, D)``; returns ``(B, T, H)``. With ``reverse`` the scan runs
    from the last frame to the first. Backward is truncation-free BPTT.
    """
    if x.values.ndim != 3 or w.values.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"rnn_scan: shapes {x.shape} and {w.shape} are incompatible")
    hdim = w.shape[1]
    if u.shape != (hdim, hdim) or b.shape != (hdim,):
        raise ShapeError(f"rnn_scan: recurrent shapes {u.shape} and {b.shape} do not match hidden {hdim}")
    xv, wv, uv = x.values, w.values, u.values
    bsz, steps, _ = xv.shape
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    pre = xv @ wv + b.values
    h = np.empty((bsz, steps, hdim))
    prev = np.zeros((bsz, hdim))
    for t in order:
        prev = np.tanh(pre[:, t] + prev @ uv)
        h[:, t] = prev

    def back(g):
        dpre = np.empty_like(h)
        du = np.zeros_like(uv)
        carry = np.zeros((bsz, hdim))
        zero = np.zeros((bsz, hdim))
        for t in reversed(list(order)):
            da = (g[:, t] + carry) * (1.0 - h[:, t] ** 2)
            dpre[:, t] = da
            prev_t = t + 1 if reverse else t - 1
            h_prev = h[:, prev_t] if 0 <= prev_t < steps else zero
            du += h_prev.T @ da
            carry = da @ uv.T
        flat = dpre.reshape(-1, hdim)
        return dpre @ wv.T, xv.reshape(-1, xv.shape[-1]).T @ flat, du, flat.sum(axis=0)

    return _node(h, (x, w, u, b), back, "rnn_scan")


# -- graph -------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every grad-requiring node."""
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    root.grad = root.grad + np.ones_like(root.values)
    for node in reversed(topological_order(root)):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                parent.grad += np.reshape(g, parent.shape)


def leaves(root: Tensor) -> list[Tensor]:
    return [n for n in topological_order(root) if n.is_leaf and n.requires_grad]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class ComputationGraph:
    """A reusable program plus the graph from its last forward evaluation."""

    program: Callable[..., Tensor]
    nodes: list[Tensor] = field(default_factory=list)
    root: Tensor | None = None
    inputs: dict[str, Tensor] = field(default_factory=dict)

    def forward(self, inputs: Mapping[str, Tensor]) -> Tensor:
        self.inputs = {}
        for name, t in inputs.items():
            t = t if isinstance(t, Tensor) else Tensor(t)
            if t.name is None:
                t.name = name
            self.inputs[name] = t
        self.root = self.program(**self.inputs)
        self.nodes = topological_order(self.root)
        return self.root

    def backward(self) -> dict[str, np.ndarray]:
        if self.root is None:
            raise GraphError("backward called before forward")
        backward(self.root)
        return {name: t.grad for name, t in self.inputs.items() if t.requires_grad}

    def parameter_count(self) -> int:
        if self.root is None:
            raise GraphError("parameter_count needs a forward evaluation first")
        return sum(t.size for t in leaves(self.root))


def evaluate_graph(inputs: Mapping[str, Tensor], program: Callable[..., Tensor]) -> Tensor:
    return ComputationGraph(program).forward(inputs)
