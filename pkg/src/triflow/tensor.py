"""
Dense arrays with reverse-mode automatic differentiation.

Every operation returns a fresh :class:`Tensor`. When one of its inputs
requires a gradient the result keeps its parents and a closure mapping the
upstream gradient to one gradient per parent. :func:`backward` traces the
graph into a :class:`ComputationRecord` and replays the closures in reverse
topological order, summing into the ``grad`` buffers of leaf tensors.

Tensors taking part in a recorded computation are never mutated in place.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "abs",
    "add",
    "as_tensor",
    "avg_pool2",
    "backward",
    "bilinear_sample",
    "concat_channels",
    "conv2d",
    "coordinate_grid",
    "default_dtype",
    "depthwise_conv2d",
    "elementwise",
    "expand",
    "get_default_dtype",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "permute",
    "relu",
    "reshape",
    "sample_planes",
    "set_default_dtype",
    "sigmoid",
    "slice_channels",
    "sub",
    "sum",
    "tanh",
]

ElementwiseKind = Literal["add", "sub", "mul", "sigmoid", "tanh", "relu"]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_SUPPORTED_DTYPES = (np.float32, np.float64)
_default_dtype: type[np.floating] = np.float32
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "triflow_grad_enabled", default=True
)


def get_default_dtype() -> type[np.floating]:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch the whole engine between 32-bit and 64-bit values."""
    global _default_dtype
    resolved = np.dtype(dtype).type
    if resolved not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}, use float32 or float64")
    _default_dtype = resolved


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording parents, e.g. for inference."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data: np.ndarray = np.array(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(data, dtype=_default_dtype)
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor.op = "leaf"
        tensor._parents = ()
        tensor._backward = None
        return tensor

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
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = fn
    return out


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), fn, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(kind: ElementwiseKind, a, b=None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes a single operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# reductions and layout


def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def fn(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _result(np.mean(a.data), (a,), fn, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(data, (a,), lambda g: (np.transpose(g, inverse),), "permute")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if _broadcast_shape(a.shape, shape) != shape:
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    data = np.array(np.broadcast_to(a.data, shape))
    return _result(data, (a,), lambda g: (_unbroadcast(g, a.shape),), "expand")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), fn, "matmul")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"channel slice {start}:{stop} out of range for {a.shape}")

    def fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), (a,), fn, "slice_channels")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    spatial = parts[0].shape[1:]
    for part in parts:
        if part.ndim != 3 or part.shape[1:] != spatial:
            raise ShapeError(
                f"concat_channels expects C×H×W parts sharing {spatial}, got {part.shape}"
            )
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=0))

    data = np.concatenate([p.data for p in parts], axis=0)
    return _result(data, tuple(parts), fn, "concat_channels")


# convolution and pooling


def _output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integer output size for input {size}, kernel {k}, stride {stride}, pad {pad}"
        )
    return span // stride + 1


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlate a C_in×H×W input with C_out×C_in×k×k weights."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and 4-D weights, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {k}×{k2}")
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d input has {x.shape[0]} channels, weights expect {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} or pad {pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    h_out = _output_size(x.shape[1], k, stride, pad)
    w_out = _output_size(x.shape[2], k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    w = weight.data

    def window(a: int, b: int) -> tuple[slice, slice, slice]:
        return (
            slice(None),
            slice(a, a + stride * (h_out - 1) + 1, stride),
            slice(b, b + stride * (w_out - 1) + 1, stride),
        )

    out = np.zeros((c_out, h_out, w_out), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            out += np.tensordot(w[:, :, a, b], xp[window(a, b)], axes=(1, 0))
    if bias is not None:
        out += bias.data[:, None, None]

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[window(a, b)] += np.tensordot(w[:, :, a, b], g, axes=(0, 0))
            gx = gxp[:, pad : pad + x.shape[1], pad : pad + x.shape[2]]
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for a in range(k):
                for b in range(k):
                    gw[:, :, a, b] = np.tensordot(g, xp[window(a, b)], axes=([1, 2], [1, 2]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation with C×1×k×k weights, stride 1."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != 1 or weight.shape[0] != x.shape[0]:
        raise ShapeError(f"depthwise_conv2d got input {x.shape} and weights {weight.shape}")
    channels, _, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d needs an odd square kernel, got {k}×{k2}")
    h_out = _output_size(x.shape[1], k, 1, pad)
    w_out = _output_size(x.shape[2], k, 1, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    w = weight.data[:, 0]
    out = np.zeros((channels, h_out, w_out), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            out += w[:, a, b, None, None] * xp[:, a : a + h_out, b : b + w_out]
    if bias is not None:
        out += bias.data[:, None, None]

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, a : a + h_out, b : b + w_out] += w[:, a, b, None, None] * g
            gx = gxp[:, pad : pad + x.shape[1], pad : pad + x.shape[2]]
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for a in range(k):
                for b in range(k):
                    gw[:, 0, a, b] = (g * xp[:, a : a + h_out, b : b + w_out]).sum(axis=(1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "depthwise_conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over 2×2 windows of the last two dims; edge windows may be smaller."""
    if x.ndim < 2:
        raise ShapeError(f"avg_pool2 needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    h2, w2 = -(-h // 2), -(-w // 2)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, 2 * h2 - h), (0, 2 * w2 - w)]
    lead = x.shape[:-2]

    def pooled_sum(a: np.ndarray) -> np.ndarray:
        return np.pad(a, pad).reshape(*a.shape[:-2], h2, 2, w2, 2).sum(axis=(-3, -1))

    counts = pooled_sum(np.ones(x.shape, dtype=x.data.dtype))
    out = pooled_sum(x.data) / counts

    def fn(g):
        spread = np.repeat(np.repeat(g / counts, 2, axis=-2), 2, axis=-1)
        return (spread.reshape(*lead, 2 * h2, 2 * w2)[..., :h, :w],)

    return _result(out, (x,), fn, "avg_pool2")


# bilinear sampling


def coordinate_grid(height: int, width: int) -> np.ndarray:
    """2×H×W array holding the (x, y) pixel coordinates of every cell."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([xs, ys]).astype(_default_dtype)


def _bilinear_gather(planes: Tensor, plane_index: np.ndarray, coords: Tensor, op: str) -> Tensor:
    n_planes, height, width = planes.shape
    x, y = coords.data[0], coords.data[1]
    xc = np.clip(x, 0, width - 1)
    yc = np.clip(y, 0, height - 1)
    x0f, y0f = np.floor(xc), np.floor(yc)
    wx, wy = xc - x0f, yc - y0f
    x0, y0 = x0f.astype(np.intp), y0f.astype(np.intp)
    # at integer coordinates the right-sided cell is used
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    data = planes.data
    v00 = data[plane_index, y0, x0]
    v01 = data[plane_index, y0, x1]
    v10 = data[plane_index, y1, x0]
    v11 = data[plane_index, y1, x1]
    out = v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy) + v10 * (1 - wx) * wy + v11 * wx * wy

    def fn(g):
        gp = gc = None
        if planes.requires_grad:
            shape = out.shape
            pi = np.broadcast_to(plane_index, shape)
            flat = np.zeros(n_planes * height * width, dtype=data.dtype)
            corners = (
                (y0, x0, (1 - wx) * (1 - wy)),
                (y0, x1, wx * (1 - wy)),
                (y1, x0, (1 - wx) * wy),
                (y1, x1, wx * wy),
            )
            for yy, xx, weight in corners:
                linear = (pi * height + np.broadcast_to(yy, shape)) * width + np.broadcast_to(xx, shape)
                flat += np.bincount(
                    linear.ravel(), weights=(g * weight).ravel(), minlength=flat.size
                ).astype(data.dtype)
            gp = flat.reshape(n_planes, height, width)
        if coords.requires_grad:
            inside_x = (x >= 0) & (x <= width - 1)
            inside_y = (y >= 0) & (y <= height - 1)
            dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * inside_x
            dy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx) * inside_y
            gc = np.stack([_unbroadcast(g * dx, x.shape), _unbroadcast(g * dy, y.shape)])
        return gp, gc

    return _result(out, (planes, coords), fn, op)


def bilinear_sample(source: Tensor, coords: Tensor) -> Tensor:
    """Sample every channel of a C×H×W map at 2×H'×W' (x, y) pixel coordinates.

    Coordinates outside the map are clamped to the border first, so the
    operation is total.
    """
    if source.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise ShapeError(f"bilinear_sample expects C×H×W and 2×H'×W', got {source.shape}, {coords.shape}")
    plane_index = np.arange(source.shape[0])[:, None, None]
    return _bilinear_gather(source, plane_index, coords, "bilinear_sample")


def sample_planes(planes: Tensor, coords: Tensor) -> Tensor:
    """Sample plane n of an N×h×w stack at the K coordinates in coords[:, n, :]."""
    if planes.ndim != 3 or coords.ndim != 3 or coords.shape[:2] != (2, planes.shape[0]):
        raise ShapeError(f"sample_planes expects N×h×w and 2×N×K, got {planes.shape}, {coords.shape}")
    plane_index = np.arange(planes.shape[0])[:, None]
    return _bilinear_gather(planes, plane_index, coords, "sample_planes")


# reverse pass


@dataclass
class ComputationRecord:
    """The recorded operations reachable from ``root``, inputs first."""

    root: Tensor
    nodes: list[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> ComputationRecord:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(root=root, nodes=order)

    def replay(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.asarray(g, dtype=node.data.dtype)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputationRecord.trace(loss).replay(np.ones_like(loss.data))
