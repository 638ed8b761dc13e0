"""Dense NCHW tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation executed while it is active and
whose inputs are tracked. ``tape.backward(loss)`` (or :func:`backward`) walks
the recorded nodes once in reverse order and returns a gradient map keyed by
the tracked leaf tensors.

Only two dtypes exist: float32 (training) and float64 (gradient checks).
Mixing them inside one op raises :class:`DTypeMismatch`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)
_DTYPES = (FLOAT32, FLOAT64)

_local = threading.local()


class DTypeMismatch(TypeError):
    pass


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _default_dtype() -> np.dtype:
    return getattr(_local, "default_dtype", FLOAT32)


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for tensors built from raw data."""
    prev = _default_dtype()
    _local.default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.default_dtype = prev


class Tensor:
    """Immutable-by-convention numeric array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _DTYPES else _default_dtype()
        dtype = np.dtype(dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype}")
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: add(neg(self), other)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents, backward, shape):
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Tape:
    """Append-only operation log for one forward pass.

    Use as a context manager; ops run inside it are recorded when at least
    one input is tracked. ``backward`` frees the log.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._freed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        if self._freed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(_Node(tuple(parents), backward, out.shape))
        out.node_id = len(self.nodes) - 1
        out._tape = self
        out.requires_grad = True

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every tracked leaf it depends on."""
        if loss.size != 1:
            raise ShapeError(f"loss must be a single element, got shape {loss.shape}")
        if self._freed:
            raise TapeError("tape already consumed by backward()")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss was not produced on this tape")
        grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
        grads[loss.node_id] = np.ones(loss.shape, dtype=loss.dtype)
        leaves: dict[Tensor, np.ndarray] = {}
        for idx in range(loss.node_id, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            grads[idx] = None
            node = self.nodes[idx]
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if parent.node_id is not None and parent._tape is self:
                    cur = grads[parent.node_id]
                    grads[parent.node_id] = pg if cur is None else cur + pg
                elif parent.requires_grad and parent.node_id is None:
                    cur = leaves.get(parent)
                    leaves[parent] = pg.copy() if cur is None else cur + pg
        self.nodes.clear()
        self._freed = True
        return leaves


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss._tape is None:
        raise TapeError("no tape recorded this loss; run the forward pass inside `with Tape():`")
    return loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# op accounting hook (used by the cost counter to cross-check analytic counts)

class OpCounter:
    """Accumulates FLOPs (1 per multiply-accumulate or elementwise op),
    feature-map elements and convolution applications for ops executed
    while it is installed."""

    def __init__(self):
        self.flops = 0
        self.activations = 0
        self.convs = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, flops: int, out_elements: int) -> None:
        self.flops += int(flops)
        self.activations += int(out_elements)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(flops)
        if kind == "conv2d":
            self.convs += 1


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    prev = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _count(kind: str, flops: int, out_elements: int) -> None:
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.add(kind, flops, out_elements)


# ---------------------------------------------------------------------------
# op plumbing

def _check_dtypes(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DTypeMismatch(f"mixed dtypes {dt.name} and {t.dtype.name}")
    return dt


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording it when a tape is active and
    any parent is tracked. ``backward(g)`` returns one gradient (or None) per
    parent."""
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(p.tracked for p in parents):
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"broadcast of {a.shape} and {b.shape} would expand both operands")
    return shape


def _scalar_or_tensor(b, like: Tensor) -> Tensor | float:
    if isinstance(b, Tensor):
        return b
    if np.ndim(b) == 0:
        return float(b)
    return Tensor(b, dtype=like.dtype)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b, a)
    if isinstance(b, float):
        out = a.data + a.dtype.type(b)
        _count("add", out.size, out.size)
        return make_result(out, (a,), lambda g: (g,))
    _check_dtypes(a, b)
    _binary_shape(a, b)
    out = a.data + b.data
    _count("add", out.size, out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b, a)
    if isinstance(b, float):
        return add(a, -b)
    _check_dtypes(a, b)
    _binary_shape(a, b)
    out = a.data - b.data
    _count("add", out.size, out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b, a)
    if isinstance(b, float):
        return scale(a, b)
    _check_dtypes(a, b)
    _binary_shape(a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    _count("mul", out.size, out.size)
    sa, sb = a.shape, b.shape
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = a.data * c
    _count("mul", out.size, out.size)
    return make_result(out, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "broadcast_add": add,
    "broadcast_mul": mul,
}


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, broadcast_add, broadcast_mul."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op.startswith("broadcast_"):
        if not isinstance(b, Tensor) or b.ndim != 4 or b.shape[2:] != (1, 1) or b.shape[:2] != a.shape[:2]:
            raise ShapeError(f"{op} expects b of shape [N,C,1,1] matching {a.shape[:2]}")
    return fn(a, b)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    _count("sqrt", out.size, out.size)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))
    _count("relu", out.size, out.size)
    return make_result(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops

def total(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(())
    _count("reduce", x.size, 1)
    shape, dt = x.shape, x.dtype
    return make_result(out, (x,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _count("pool", x.size, out.size)
    inv = x.dtype.type(1.0 / (h * w))
    return make_result(out, (x,), lambda g: (np.broadcast_to(g * inv, (n, c, h, w)).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return make_result(out, (x,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*tensors)
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError("stack needs equal shapes")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_result(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    out = np.take(x.data, index, axis=axis)
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return make_result(out, (x,), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return make_result(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# matmul and softmax

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [m,k]x[k,n], or batched [B,m,k]x[B,k,n]."""
    _check_dtypes(a, b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul expects two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _count("matmul", out.size * a.shape[-1], out.size)

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(out, (a, b), bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", 3 * out.size, out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------------------
# finite differences (test/verification helper)

def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5,
                       indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr``, perturbed in place.

    ``arr`` must be float64. When ``indices`` is given only those entries are
    evaluated (others left at 0).
    """
    if arr.dtype != FLOAT64:
        raise DTypeMismatch("finite differences require float64 data")
    grad = np.zeros_like(arr)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# strict sequential mode

_seq_state = {"on": False, "limiter": None}


def set_sequential(flag: bool) -> None:
    """Pin BLAS to one thread and disable background batch producers.

    Results in this mode are bitwise reproducible for identical inputs.
    """
    from threadpoolctl import threadpool_limits

    if flag and not _seq_state["on"]:
        _seq_state["limiter"] = threadpool_limits(limits=1)
    elif not flag and _seq_state["on"] and _seq_state["limiter"] is not None:
        _seq_state["limiter"].restore_original_limits()
        _seq_state["limiter"] = None
    _seq_state["on"] = bool(flag)


def is_sequential() -> bool:
    return _seq_state["on"]
