"""Dense tensor with tape-based reverse-mode differentiation.

Every public operation returns a new :class:`Tensor`; tensors are never
mutated after construction. Operations on tensors that require gradients
record a node (parents plus a closure computing the parents' adjoints).
:func:`backward` sorts the recorded graph topologically and replays the
adjoints in reverse.

There is no implicit broadcasting. Binary elementwise operations demand
identical shapes; use :func:`expand` to repeat along a new axis.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "track_allocations",
    "backward",
    "grad",
    "conv2d",
    "conv1d",
    "softmax",
    "matmul",
    "bmm",
    "reduce_sum",
    "reduce_mean",
    "elementwise_mul",
    "mean_pool_spatial",
    "reshape",
    "permute",
    "take",
    "concat",
    "stack",
    "expand",
    "add",
    "sub",
    "scale",
    "leaky_relu",
    "silu",
    "sqrt",
    "avg_pool2",
    "upsample2",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class AllocationCounter:
    """Running count of live tensor elements created inside a block."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.largest = 0

    def _alloc(self, n: int) -> None:
        self.live += n
        self.largest = max(self.largest, n)
        self.peak = max(self.peak, self.live)

    def _free(self, n: int) -> None:
        self.live -= n


@contextlib.contextmanager
def track_allocations():
    """Count elements of tensors constructed inside the block.

    Freed tensors are subtracted when CPython releases them, so ``peak`` is
    the high-water mark of simultaneously live elements.
    """
    counter = AllocationCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: Tuple["Tensor", ...], backward_fn: Callable):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Immutable n-dimensional real array.

    ``requires_grad`` marks leaves whose gradient :func:`backward` reports;
    non-leaf results inherit it from their inputs.
    """

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        counter = getattr(_state, "counter", None)
        if counter is not None:
            counter._alloc(arr.size)
            weakref.finalize(self, counter._free, arr.size)

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        # Internal constructor: takes ownership of arr without copying.
        out = cls.__new__(cls)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("operation produced non-finite values")
        arr.setflags(write=False)
        out.data = arr
        tracked = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._node = _Node(tuple(parents), backward_fn) if tracked else None
        counter = getattr(_state, "counter", None)
        # views over a parent's buffer (reshape, slicing) allocate nothing
        if counter is not None and not any(np.may_share_memory(arr, p.data) for p in parents):
            counter._alloc(arr.size)
            weakref.finalize(out, counter._free, arr.size)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _axis(op: str, t: Tensor, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {t.shape}")
    return axis % t.ndim


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. every tracked tensor in its graph.

    Returns a dict keyed by tensor identity. Adjoints are accumulated by
    addition in the order the reverse sweep first reaches each edge, which
    is fixed by the recorded graph, so results are deterministic.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo_order(loss)
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t._node is None:
            continue
        parent_grads = t._node.backward_fn(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"internal: adjoint shape {pg.shape} for tensor of shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return {t: grads[id(t)] for t in order if id(t) in grads}


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` for each tensor in ``wrt`` (zeros if unreachable)."""
    g = backward(loss)
    return [g.get(t, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._wrap(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._wrap(a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor._wrap(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return Tensor._wrap(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); smooth, so finite differences never straddle a kink."""
    x = a.data
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    out = x * sig
    return Tensor._wrap(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("sqrt: input must be strictly positive")
    out = np.sqrt(a.data)
    return Tensor._wrap(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return Tensor._wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor._wrap(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),)
    )


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one slice along ``axis``, removing that axis."""
    axis = _axis("take", a, axis)
    if not 0 <= index < a.shape[axis]:
        raise IndexError(f"take: index {index} out of range for extent {a.shape[axis]}")

    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    sl = (slice(None),) * axis + (index,)
    return Tensor._wrap(a.data[sl], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = _axis("concat", tensors[0], axis)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._wrap(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    return Tensor._wrap(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return Tensor._wrap(out, (a,), lambda g: (g.sum(axis=axis),))


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis: int) -> Tensor:
    axis = _axis("reduce_sum", a, axis)
    out = a.data.sum(axis=axis)
    if out.ndim == 0:
        out = out.reshape(())
    return Tensor._wrap(
        np.asarray(out), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    )


def reduce_mean(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Mean over ``axes`` (all axes when None)."""
    if axes is None:
        axes = tuple(range(a.ndim))
    axes = tuple(sorted(_axis("reduce_mean", a, ax) for ax in axes))
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axes))

    def bw(g):
        g = np.asarray(g)
        for ax in axes:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / a.dtype.type(n), a.shape).copy(),)

    return Tensor._wrap(out, (a,), bw)


def mean_pool_spatial(a: Tensor) -> Tensor:
    """Average over the trailing two (H, W) axes."""
    if a.ndim < 2:
        raise ShapeError(f"mean_pool_spatial needs at least 2 axes, got {a.shape}")
    return reduce_mean(a, (a.ndim - 2, a.ndim - 1))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._wrap(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of [B,P,Q] and [B,Q,R]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._wrap(
        ad @ bd, (a, b), lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g)
    )


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    axis = _axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xc: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # xc: channel-major [C,B,H,W] -> [C*kh*kw, B*H*W], zero padded to keep extents.
    c, b, h, w = xc.shape
    if kh == 1 and kw == 1:
        return xc.reshape(c, b * h * w)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(xc, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, b, h, w), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * kh * kw, b * h * w)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    # adjoint of _im2col: [C*kh*kw, B*H*W] -> channel-major [C,B,H,W]
    c, b, h, w = shape
    if kh == 1 and kw == 1:
        return cols.reshape(c, b, h, w)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    cols = cols.reshape(c, kh, kw, b, h, w)
    out = np.zeros((c, b, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + h, j : j + w] += cols[:, i, j]
    return out[:, :, ph : ph + h, pw : pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2D cross-correlation with zero padding.

    ``x`` is [C_in,H,W] or batched [B,C_in,H,W]; ``weight`` is
    [C_out,C_in,kh,kw] with odd kernel extents; ``bias`` is [C_out].
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [C_out,C_in,kh,kw], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[-3]} channels, weight expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must be [{c_out}], got {bias.shape}")
    xd = x.data if batched else x.data[None]
    b, _, h, w = xd.shape
    xc = np.ascontiguousarray(xd.transpose(1, 0, 2, 3))
    cols = _im2col(xc, kh, kw)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = out.reshape(c_out, b, h, w).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out if batched else out[0])

    def bw(g):
        g4 = g if batched else g[None]
        gm = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        gb = gm.sum(axis=1)
        gx = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ gm, xc.shape, kh, kw).transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx if batched else gx[0])
        return (gx, gw, gb)

    return Tensor._wrap(out, (x, weight, bias), bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1D cross-correlation: [C_in,T] * [C_out,C_in,k] -> [C_out,T]."""
    if x.ndim != 2 or weight.ndim != 3 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d: incompatible input {x.shape} and weight {weight.shape}")
    c_in, t = x.shape
    c_out, _, k = weight.shape
    x4 = reshape(x, (c_in, 1, t))
    w4 = reshape(weight, (c_out, c_in, 1, k))
    return reshape(conv2d(x4, w4, bias), (c_out, t))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the trailing (H, W) axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: extents {h}x{w} are not even")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * x.dtype.type(0.25),)

    return Tensor._wrap(out, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the trailing (H, W) axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    return Tensor._wrap(out, (x,), lambda g: (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),))
