"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a :class:`TensorNode` that remembers its parents and a
closure mapping the output gradient to input gradients. ``backward`` walks
the recorded graph once in reverse topological order. Graphs are rebuilt on
every forward pass; nothing is cached between calls.

Values are plain numpy arrays. Model runs use float32, gradient checks use
float64; ops keep whatever dtype their inputs carry.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(ValueError):
    """A call violated an op precondition other than shape."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class TensorNode:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[TensorNode, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> TensorNode:
        return TensorNode(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"TensorNode(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> TensorNode:
    if isinstance(x, TensorNode):
        return x
    return TensorNode(np.asarray(x, dtype=dtype))


def constant(arr: np.ndarray) -> TensorNode:
    """Wrap a trusted array as a non-differentiable leaf without validation."""
    out = TensorNode.__new__(TensorNode)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out.op = "leaf"
    out._parents = ()
    out._backward = None
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


def _make(data: np.ndarray, op: str, parents: Iterable[TensorNode], backward_fn) -> TensorNode:
    _check_finite(data, op)
    out = TensorNode.__new__(TensorNode)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a} with {b}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a: TensorNode, b: TensorNode) -> TensorNode:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, TensorNode) else None)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: TensorNode, b: TensorNode) -> TensorNode:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: TensorNode, b: TensorNode) -> TensorNode:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), back)


def scale(a: TensorNode, c: float) -> TensorNode:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def silu(x: TensorNode) -> TensorNode:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def back(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _make(xd * sig, "silu", (x,), back)


def abs_(x: TensorNode) -> TensorNode:
    xd = x.data
    return _make(np.abs(xd), "abs", (x,), lambda g: (g * np.sign(xd),))


def square(x: TensorNode) -> TensorNode:
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: TensorNode, axis=None, keepdims: bool = False) -> TensorNode:
    xd = x.data
    out = np.sum(xd, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _make(np.asarray(out, dtype=xd.dtype), "sum", (x,), back)


def mean(x: TensorNode, axis=None) -> TensorNode:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis), 1.0 / float(count))


def reshape(x: TensorNode, shape: Sequence[int]) -> TensorNode:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: TensorNode, axis1: int = -2, axis2: int = -1) -> TensorNode:
    if x.ndim < 2:
        raise DimensionError("transpose: need at least 2 dims")
    return _make(
        np.ascontiguousarray(np.swapaxes(x.data, axis1, axis2)),
        "transpose",
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


def concat(xs: Sequence[TensorNode], axis: int = 0) -> TensorNode:
    if not xs:
        raise DimensionError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tuple(xs), back)


def stack(xs: Sequence[TensorNode], axis: int = 0) -> TensorNode:
    if not xs:
        raise DimensionError("stack: no inputs")
    axis = axis % (xs[0].ndim + 1)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def slice_(x: TensorNode, idx) -> TensorNode:
    """Basic (non-fancy) indexing."""
    src_shape, dtype = x.shape, x.dtype
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from exc

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), "slice", (x,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul: batch extents {a.shape[:-2]} vs {b.shape[:-2]}") from exc
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), "matmul", (a, b), back2)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), back)


# ---------------------------------------------------------------------------
# normalization and probability


def softmax_lastdim(x: TensorNode, mask: np.ndarray | None = None) -> TensorNode:
    """Softmax over the last axis. ``mask`` (broadcastable bool) marks allowed
    entries; disallowed entries get probability exactly 0."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_lastdim: empty last dim")
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (x,), back)


def log_softmax_lastdim(x: TensorNode) -> TensorNode:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("log_softmax_lastdim: empty last dim")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), back)


def rms_norm(x: TensorNode, gain: TensorNode | None = None, eps: float = 1e-6) -> TensorNode:
    """x / sqrt(mean(x^2) + eps) over the last axis, optionally times ``gain``."""
    xd = x.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv

    def back(g):
        # d/dx of x*inv: inv*g - x*inv^3*mean(g*x)
        return (inv * (g - normed * inv * (g * xd).sum(axis=-1, keepdims=True) / d),)

    out = _make(normed.astype(xd.dtype, copy=False), "rms_norm", (x,), back)
    if gain is not None:
        out = mul(out, gain)
    return out


def embedding_lookup(table: TensorNode, ids) -> TensorNode:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding_lookup: id out of range [0, {vocab})")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], "embedding", (table,), back)


def rope(x: TensorNode, cos: np.ndarray, sin: np.ndarray) -> TensorNode:
    """Rotary embedding in the rotate-half layout. ``cos``/``sin`` have shape
    [T, head_dim/2] and broadcast over leading dims of ``x`` [..., T, head_dim]."""
    half = x.shape[-1] // 2
    if x.shape[-1] != 2 * half:
        raise DimensionError("rope: head_dim must be even")
    xd = x.data
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def back(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _make(out.astype(xd.dtype, copy=False), "rope", (x,), back)


# ---------------------------------------------------------------------------
# losses


def l1_loss(a: TensorNode, b: TensorNode, normalize: str = "per_element") -> TensorNode:
    """Absolute-difference loss.

    ``per_position``: axis 0 indexes positions; sum |a-b| over everything else
    and divide by the number of positions. ``per_element``: plain MAE.
    """
    return _norm_loss(a, b, normalize, abs_, "l1_loss")


def mse_loss(a: TensorNode, b: TensorNode, normalize: str = "per_element") -> TensorNode:
    return _norm_loss(a, b, normalize, square, "mse_loss")


def _norm_loss(a, b, normalize, elementwise, name) -> TensorNode:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim == 0:
        raise DimensionError(f"{name}: need at least 1 dim")
    total = sum_(elementwise(sub(a, b)))
    if normalize == "per_position":
        return scale(total, 1.0 / a.shape[0])
    if normalize == "per_element":
        return scale(total, 1.0 / a.data.size)
    raise ContractError(f"{name}: unknown normalize mode {normalize!r}")


def kl_divergence_lastdim(p_logits: TensorNode, q_logits: TensorNode) -> TensorNode:
    """Mean over rows of KL(softmax(p) || softmax(q)). Gradient flows to both."""
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence_lastdim: shapes differ, {p_logits.shape} vs {q_logits.shape}")
    logp = log_softmax_lastdim(p_logits)
    logq = log_softmax_lastdim(q_logits)
    p = _exp(logp)
    rows = int(np.prod(p_logits.shape[:-1])) if p_logits.ndim > 1 else 1
    return scale(sum_(mul(p, sub(logp, logq))), 1.0 / rows)


def _exp(x: TensorNode) -> TensorNode:
    e = np.exp(x.data)
    return _make(e, "exp", (x,), lambda g: (g * e,))


def cross_entropy(logits: TensorNode, targets) -> TensorNode:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    xd = logits.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    rows = np.arange(len(targets))
    nll = np.log(z[:, 0]) - shifted[rows, targets]
    t = len(targets)

    def back(g):
        grad = e / z
        grad[rows, targets] -= 1.0
        return (grad * (g / t),)

    return _make(np.asarray(nll.mean(), dtype=xd.dtype), "cross_entropy", (logits,), back)


# ---------------------------------------------------------------------------
# backward


def backward(loss: TensorNode) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")

    order: list[TensorNode] = []
    seen: set[int] = set()
    stack_: list[tuple[TensorNode, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.dtype:
                pg = pg.astype(parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
