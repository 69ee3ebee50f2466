"""A small reverse-mode automatic differentiation engine on top of numpy.

Only the operations needed by the captioning model are provided. Every op
records its parents and a closure mapping the output gradient to parent
gradients; `backward` walks the recorded tape in reverse and returns the
gradients as a plain dict, leaving the tensors themselves untouched. That
keeps evaluation free of side effects, so independent examples can be
differentiated concurrently against shared, read-only parameters.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_seq = itertools.count()
_state = threading.local()
_default_dtype = np.float32


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a tape."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the dtype used for freshly created constants."""
    global _default_dtype
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    prev = _default_dtype
    _default_dtype = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "seq", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, op="const", requires_grad=False):
        if isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
            arr = np.asarray(data)
        else:
            # python scalars and integer arrays adopt the current precision
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.seq = next(_seq)
        self.requires_grad = requires_grad

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
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: index(self, idx)


def param(data) -> Tensor:
    """A leaf that gradients flow into."""
    return Tensor(data, op="param", requires_grad=True)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype))


def _make(data, parents, backward_fn, op) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, op, requires_grad=True)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = constant(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = constant(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sigmoid(a) -> Tensor:
    a = constant(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = constant(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """log(1 + e^x), i.e. -log(1 - sigmoid(x))."""
    a = constant(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _make(out, (a,), backward, "softplus")


def log1mexp(a) -> Tensor:
    """log(1 - e^x) for x < 0; inputs are clamped just below zero."""
    a = constant(a)
    tiny = np.finfo(a.data.dtype).tiny
    x = np.minimum(a.data, -tiny)
    with np.errstate(divide="ignore"):
        # both branches are evaluated; only the selected one is finite everywhere
        out = np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))
    return _make(out, (a,), lambda g: (-g / np.expm1(-x),), "log1mexp")


def abs_(a) -> Tensor:
    a = constant(a)
    # right derivative at the kink: d|x|/dx = 1 at x == 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.where(a.data >= 0, 1, -1).astype(g.dtype),), "abs")


def dropout(a, keep: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or keep == 1."""
    a = constant(a)
    if not train or keep >= 1.0:
        return a
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must lie in (0, 1], got {keep}")
    mask = (rng.random(a.shape) < keep).astype(a.data.dtype) / keep
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D and 2-D operands, got {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _make(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = constant(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = np.stack([t.data for t in tensors])
    return _make(out, tuple(tensors), lambda g: tuple(g), "stack")


def reshape(a, shape) -> Tensor:
    a = constant(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a, idx) -> Tensor:
    a = constant(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward, "index")


def embedding_lookup(table, row: int) -> Tensor:
    table = constant(table)
    n = table.shape[0]
    if not 0 <= row < n:
        raise IndexError(f"embedding row {row} out of range for table with {n} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        full[row] = g
        return (full,)

    return _make(table.data[row], (table,), backward, "lookup")


# reductions


def sum_(a, axis=None) -> Tensor:
    a = constant(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, with the row max subtracted first."""
    a = constant(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax_rows(a) -> Tensor:
    a = constant(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# tape and gradients


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from `root` in topological order (operands first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar `loss` for each named parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(tape(loss)):
            g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    return out


def first_nonfinite(root: Tensor) -> tuple[int, Tensor] | None:
    for i, node in enumerate(tape(root)):
        if not np.all(np.isfinite(node.data)):
            return i, node
    return None


# finite-difference checking


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def __getitem__(self, name: str) -> ParamCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def format(self) -> str:
        lines = [f"{'parameter':<28} {'max rel err':>12}  status"]
        for c in self.checks:
            lines.append(f"{c.name:<28} {c.max_rel_error:>12.3e}  {'ok' if c.passed else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(g_ad, g_fd):
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return np.abs(g_ad - g_fd) / denom


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names: Sequence[str] | None = None,
    fd_dtype=np.longdouble,
) -> GradCheckReport:
    """Compare reverse-mode gradients of `f` with central differences.

    `f` maps named parameter tensors to a scalar. Reverse-mode gradients are
    computed in 64-bit. The finite differences are evaluated in `fd_dtype`
    (extended precision by default): with a step of 1e-5 a 64-bit central
    difference carries ~1e-10 of roundoff, which swamps entries whose true
    gradient is that small.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with precision(64):
        leaves = {k: param(v) for k, v in values.items()}
        loss = f(leaves)
        bad = first_nonfinite(loss)
        if bad is not None:
            i, node = bad
            raise NonFiniteError(
                f"non-finite value at tape node {i} (op '{node.op}', shape {node.shape})",
                node_index=i,
                op=node.op,
            )
        analytic = backward(loss, leaves)
        report = GradCheckReport(tolerance=tolerance, step=step)

        ext = {k: v.astype(fd_dtype) for k, v in values.items()}

        def evaluate():
            with no_grad():
                return f({k: Tensor(v) for k, v in ext.items()}).data

        for name in names or list(values):
            arr = ext[name]
            fd = np.zeros(arr.shape)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = evaluate()
                arr[idx] = orig - step
                down = evaluate()
                arr[idx] = orig
                fd[idx] = float((up - down) / (2 * arr.dtype.type(step)))
            err = relative_error(analytic[name], fd)
            worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
            max_err = float(err.max()) if err.size else 0.0
            report.checks.append(ParamCheck(name, max_err, tuple(int(i) for i in worst), max_err < tolerance))
    return report
