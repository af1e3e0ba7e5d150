"""
Tensor Autodiff
===============

Minimal reverse-mode differentiation engine on numpy arrays.

Each primitive is a Function subclass with a numpy forward and a backward that
maps the output gradient to one gradient per input. Function.apply wraps the
result in a Tensor that remembers its creator whenever an input requires grad;
backward() records the reachable creators on a ComputationTape and replays it in
reverse.

Shapes are explicit: binary elementwise ops require identical shapes, the only
implicit broadcast is the per-channel bias of conv2d/add_bias. Use expand() to
broadcast a size-1 axis.
"""

import contextlib
import logging
import threading
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from metastab.errors import ConfigError, GradientError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_grad_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Switch between 32-bit (default) and 64-bit scalars"""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"Unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """
    Array of scalars with an optional gradient buffer.

    Leaves created with requires_grad=True accumulate ∂root/∂leaf into .grad
    on backward(); intermediate results keep a reference to their creator.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _creator: Optional['Function'] = None,
    ):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.creator = _creator

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self) -> 'ComputationTape':
        return backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False) -> 'Tensor':
        return max_(self, axis=axis, keepdims=keepdims)

    def min(self, axis: int, keepdims: bool = False) -> 'Tensor':
        return min_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> 'Tensor':
        return permute(self, axes)

    def abs(self) -> 'Tensor':
        return abs_(self)

    def square(self) -> 'Tensor':
        return square(self)

    def sqrt(self) -> 'Tensor':
        return sqrt(self)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def relu(self) -> 'Tensor':
        return relu(self)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap arrays and scalars as constant tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_DEFAULT_DTYPE))


# ============================================================================
# FUNCTION BASE + TAPE
# ============================================================================

class Function:
    """
    Base class for differentiable primitives.

    forward() receives the input arrays and returns the output array;
    backward() receives the output gradient and returns a tuple with one entry
    per input (None where no gradient flows).
    """

    name = 'function'

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, _creator=fn if track else None)


class ComputationTape:
    """
    Ordered record of the primitives that produced a root tensor.

    Nodes are stored inputs-before-consumers, so replaying the list backwards
    visits every node once and only after all of its consumers.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._record(root)

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def _record(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def replay(self, seed: np.ndarray):
        grads: Dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = node.creator.backward(grad)
            for parent, g in zip(node.creator.inputs, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(
                        f"{node.creator.name}: gradient shape {g.shape} does not match input {parent.shape}"
                    )
                key = id(parent)
                grads[key] = g if key not in grads else grads[key] + g


def backward(root: Tensor) -> ComputationTape:
    """
    Write ∂root/∂leaf into .grad of every leaf with requires_grad

    Args:
        root: Scalar tensor (one element)

    Returns:
        The tape that was replayed
    """
    if root.size != 1:
        raise GradientError(f"backward: root must be scalar, got shape {root.shape}")
    tape = ComputationTape(root)
    if root.requires_grad:
        tape.replay(np.ones_like(root.data))
    return tape


# ============================================================================
# ELEMENTWISE
# ============================================================================

def _check_same(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not conformable")


class Add(Function):
    name = 'add'

    def forward(self, a, b):
        _check_same(self.name, a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        _check_same(self.name, a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        _check_same(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    name = 'div'

    def forward(self, a, b):
        _check_same(self.name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        return ga, -ga * self.a / self.b


class AddScalar(Function):
    name = 'add_scalar'

    def forward(self, a, value: float):
        return a + a.dtype.type(value)

    def backward(self, grad):
        return (grad,)


class MulScalar(Function):
    name = 'mul_scalar'

    def forward(self, a, value: float):
        self.value = a.dtype.type(value)
        return a * self.value

    def backward(self, grad):
        return (grad * self.value,)


class Abs(Function):
    name = 'abs'

    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Square(Function):
    name = 'square'

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (grad * 2 * self.a,)


class Sqrt(Function):
    name = 'sqrt'

    def forward(self, a):
        if np.any(a < 0):
            raise GradientError(f"sqrt: {int(np.sum(a < 0))} negative inputs (min {float(np.min(a)):.3g})")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Exp(Function):
    name = 'exp'

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = 'log'

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class ReLU(Function):
    name = 'relu'

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    name = 'leaky_relu'

    def forward(self, a, slope: float):
        self.scale = np.where(a > 0, 1, slope).astype(a.dtype)
        return a * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Clamp(Function):
    name = 'clamp'

    def forward(self, a, low: float, high: float):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


# ============================================================================
# REDUCTIONS
# ============================================================================

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    name = 'sum'

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        kept = list(self.shape)
        for ax in self.axes:
            kept[ax] = 1
        return (np.broadcast_to(grad.reshape(kept), self.shape).copy(),)


class Mean(Function):
    name = 'mean'

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.count = int(np.prod([a.shape[ax] for ax in self.axes])) if self.axes else 1
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        kept = list(self.shape)
        for ax in self.axes:
            kept[ax] = 1
        return (np.broadcast_to(grad.reshape(kept) / self.count, self.shape).copy(),)


class Max(Function):
    """Maximum along one axis; the gradient goes to the first maximal entry"""

    name = 'max'

    def forward(self, a, axis: int, keepdims=False):
        self.axis = axis % a.ndim
        self.shape = a.shape
        self.index = np.argmax(a, axis=self.axis)
        out = np.take_along_axis(a, np.expand_dims(self.index, self.axis), axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=grad.dtype)
        kept = list(self.shape)
        kept[self.axis] = 1
        np.put_along_axis(g, np.expand_dims(self.index, self.axis), grad.reshape(kept), axis=self.axis)
        return (g,)


# ============================================================================
# SHAPE
# ============================================================================

class Reshape(Function):
    name = 'reshape'

    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Permute(Function):
    name = 'permute'

    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"permute: axes {tuple(axes)} invalid for shape {a.shape}")
        self.inverse = np.argsort(axes)
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class Expand(Function):
    """Broadcast size-1 axes to an explicit target shape"""

    name = 'expand'

    def forward(self, a, shape):
        shape = tuple(shape)
        if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
            raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
        self.axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (np.sum(grad, axis=self.axes, keepdims=True),)


class GetItem(Function):
    name = 'getitem'

    def forward(self, a, index):
        self.shape = a.shape
        self.index = index
        return a[index]

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(g, self.index, grad)
        return (g,)


class Take(Function):
    name = 'take'

    def forward(self, a, indices, axis=0):
        self.shape = a.shape
        self.indices = np.asarray(indices)
        self.axis = axis % a.ndim
        return np.take(a, self.indices, axis=self.axis)

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=grad.dtype)
        moved = np.moveaxis(g, self.axis, 0)
        np.add.at(moved, self.indices, np.moveaxis(grad, self.axis, 0))
        return (g,)


class Concat(Function):
    name = 'concat'

    def forward(self, *arrays, axis=1):
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(arr.shape, ref)) if i != axis % len(ref)
            ):
                raise ShapeError(f"concat: shapes {ref} and {arr.shape} differ off axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class EdgePad(Function):
    """Pad the two spatial axes of an N×C×H×W tensor by edge replication"""

    name = 'edge_pad'

    def forward(self, a, pads):
        top, bottom, left, right = pads
        self.pads = pads
        self.shape = a.shape
        return np.pad(a, ((0, 0), (0, 0), (top, bottom), (left, right)), mode='edge')

    def backward(self, grad):
        top, bottom, left, right = self.pads
        g = grad.copy()
        # fold replicated rows/cols back onto the edge they copy
        if top:
            g[:, :, top, :] += g[:, :, :top, :].sum(axis=2)
        if bottom:
            g[:, :, -bottom - 1, :] += g[:, :, -bottom:, :].sum(axis=2)
        g = g[:, :, top:g.shape[2] - bottom, :]
        if left:
            g[:, :, :, left] += g[:, :, :, :left].sum(axis=3)
        if right:
            g[:, :, :, -right - 1] += g[:, :, :, -right:].sum(axis=3)
        g = g[:, :, :, left:g.shape[3] - right]
        return (np.ascontiguousarray(g),)


# ============================================================================
# LINEAR ALGEBRA / CONVOLUTION
# ============================================================================

class MatMul(Function):
    """2-D matrix product, or batched over a shared leading axis"""

    name = 'matmul'

    def forward(self, a, b):
        if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != b.shape[-2] or (
            a.ndim == 3 and a.shape[0] != b.shape[0]
        ):
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        return np.matmul(grad, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), grad)


class AddBias(Function):
    """Add a per-channel bias along axis 1"""

    name = 'add_bias'

    def forward(self, a, b):
        if b.ndim != 1 or a.ndim < 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"add_bias: shapes {a.shape} and {b.shape} are not conformable")
        self.axes = tuple(i for i in range(a.ndim) if i != 1)
        return a + b.reshape((1, -1) + (1,) * (a.ndim - 2))

    def backward(self, grad):
        return grad, grad.sum(axis=self.axes)


class Conv2d(Function):
    """
    Cross-correlation of N×C×H×W input with O×C×kh×kw weights

    Lowered to a single matrix product over im2col patches.
    """

    name = 'conv2d'

    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} are not conformable")
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        if h + 2 * padding < kh or wd + 2 * padding < kw:
            raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        wmat = w.reshape(o, -1)
        out = cols @ wmat.T
        self.cols, self.wmat = cols, wmat
        self.geometry = (n, c, h, wd, o, kh, kw, ho, wo, stride, padding, xp.shape)
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(self, grad):
        n, c, h, wd, o, kh, kw, ho, wo, stride, padding, padded_shape = self.geometry
        grows = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (grows.T @ self.cols).reshape(o, c, kh, kw)
        gcols = (grows @ self.wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return np.ascontiguousarray(gx), gw


class Upsample2x(Function):
    """Nearest-neighbour ×2 upsampling of N×C×H×W"""

    name = 'upsample2x'

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"upsample2x: expected N×C×H×W, got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


class BilinearSample(Function):
    """
    Sample N×C×H×W images at continuous (x, y) coordinates of shape N×H'×W'.

    Coordinates are clamped to the image, which replicates edge pixels.
    Gradients flow to the image and to the coordinates (zero where clamped).
    """

    name = 'bilinear_sample'

    def forward(self, image, xs, ys):
        if image.ndim != 4 or xs.shape != ys.shape or xs.ndim != 3 or xs.shape[0] != image.shape[0]:
            raise ShapeError(
                f"bilinear_sample: image {image.shape} with coordinates {xs.shape}/{ys.shape}"
            )
        n, c, h, w = image.shape
        x = np.clip(xs, 0, w - 1)
        y = np.clip(ys, 0, h - 1)
        # non-finite coordinates index pixel 0; fx/fy stay NaN and poison the output
        x0 = np.minimum(np.floor(np.where(np.isfinite(x), x, 0)).astype(np.int64), max(w - 2, 0))
        y0 = np.minimum(np.floor(np.where(np.isfinite(y), y, 0)).astype(np.int64), max(h - 2, 0))
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (x - x0).astype(image.dtype)[:, None]
        fy = (y - y0).astype(image.dtype)[:, None]
        batch = np.arange(n)[:, None, None]
        hwc = image.transpose(0, 2, 3, 1)
        i00 = hwc[batch, y0, x0].transpose(0, 3, 1, 2)
        i01 = hwc[batch, y0, x1].transpose(0, 3, 1, 2)
        i10 = hwc[batch, y1, x0].transpose(0, 3, 1, 2)
        i11 = hwc[batch, y1, x1].transpose(0, 3, 1, 2)
        self.saved = (image.shape, batch, x0, x1, y0, y1, fx, fy, i00, i01, i10, i11)
        self.inside_x = ((xs >= 0) & (xs <= w - 1))[:, None]
        self.inside_y = ((ys >= 0) & (ys <= h - 1))[:, None]
        top = i00 * (1 - fx) + i01 * fx
        bottom = i10 * (1 - fx) + i11 * fx
        return top * (1 - fy) + bottom * fy

    def backward(self, grad):
        shape, batch, x0, x1, y0, y1, fx, fy, i00, i01, i10, i11 = self.saved
        n, c, h, w = shape
        g_hwc = np.zeros((n, h, w, c), dtype=grad.dtype)
        corners = (
            (y0, x0, (1 - fx) * (1 - fy)),
            (y0, x1, fx * (1 - fy)),
            (y1, x0, (1 - fx) * fy),
            (y1, x1, fx * fy),
        )
        for yy, xx, weight in corners:
            np.add.at(g_hwc, (batch, yy, xx), (grad * weight).transpose(0, 2, 3, 1))
        gx = ((i01 - i00) * (1 - fy) + (i11 - i10) * fy) * grad * self.inside_x
        gy = ((i10 - i00) * (1 - fx) + (i11 - i01) * fx) * grad * self.inside_y
        return g_hwc.transpose(0, 3, 1, 2).copy(), gx.sum(axis=1), gy.sum(axis=1)


# ============================================================================
# FUNCTIONAL API
# ============================================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def add_scalar(a: Tensor, value: float) -> Tensor:
    return AddScalar.apply(a, value=value)


def mul_scalar(a: Tensor, value: float) -> Tensor:
    return MulScalar.apply(a, value=value)


def abs_(a: Tensor) -> Tensor:
    return Abs.apply(a)


def square(a: Tensor) -> Tensor:
    return Square.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    return LeakyReLU.apply(a, slope=slope)


def clamp(a: Tensor, low: float = 0.0, high: float = 1.0) -> Tensor:
    return Clamp.apply(a, low=low, high=high)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return Max.apply(a, axis=axis, keepdims=keepdims)


def min_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return mul_scalar(max_(mul_scalar(a, -1.0), axis=axis, keepdims=keepdims), -1.0)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(a, axes=tuple(axes))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Expand.apply(a, shape=tuple(shape))


def getitem(a: Tensor, index) -> Tensor:
    return GetItem.apply(a, index=index)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    return Take.apply(a, indices=indices, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def edge_pad(a: Tensor, pads: Tuple[int, int, int, int]) -> Tensor:
    return EdgePad.apply(a, pads=tuple(pads))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    return AddBias.apply(a, b)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    return add_bias(out, b) if b is not None else out


def upsample2x(x: Tensor) -> Tensor:
    return Upsample2x.apply(x)


def bilinear_sample(image: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    return BilinearSample.apply(image, xs, ys)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (N×in) @ w (in×out) + b"""
    out = matmul(x, w)
    return add_bias(out, b) if b is not None else out


# ============================================================================
# PARAMETERS + OPTIMIZERS
# ============================================================================

class ParamVector:
    """
    Named, ordered set of learnable leaf tensors (θ of the synthesis net, φ of
    the affine regressor) with flatten/assign helpers.
    """

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors: Dict[str, Tensor] = dict(tensors)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> 'ParamVector':
        return cls({
            name: Tensor(np.array(arr, copy=True), requires_grad=requires_grad, name=name)
            for name, arr in arrays.items()
        })

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def clone(self, requires_grad: bool = True) -> 'ParamVector':
        """Independent copy of the values; gradients are not copied"""
        return ParamVector.from_arrays({n: t.data for n, t in self._tensors.items()}, requires_grad)

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._tensors.values()])

    def assign_flat(self, vector: np.ndarray):
        if vector.size != self.num_parameters:
            raise ShapeError(f"assign_flat: vector of {vector.size} values for {self.num_parameters} parameters")
        offset = 0
        for t in self._tensors.values():
            t.data = vector[offset:offset + t.size].reshape(t.shape).astype(t.dtype)
            offset += t.size

    def gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for name, t in self._tensors.items():
            if t.grad is None:
                raise GradientError(f"parameter '{name}' has no gradient")
            grads[name] = t.grad
        return grads

    def grads_flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.gradients().values()])

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None


def sgd_step(params: ParamVector, lr: float) -> ParamVector:
    """
    p ← p − lr·g for every parameter, then clear gradients

    Raises GradientError if any parameter lacks a gradient.
    """
    grads = params.gradients()
    for name, t in params.items():
        t.data = (t.data - t.dtype.type(lr) * grads[name]).astype(t.dtype)
    params.zero_grad()
    return params


class Adam:
    """Adam over a ParamVector; step() takes explicit gradients or reads .grad"""

    def __init__(self, params: ParamVector, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None):
        if grads is None:
            grads = self.params.gradients()
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        self.params.zero_grad()


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def finite_difference_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-3,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Central finite differences of a scalar function w.r.t. entries of tensor

    Args:
        fn: Zero-argument callable returning a scalar Tensor
        tensor: Tensor whose .data is perturbed in place
        h: Step size
        indices: Flat indices to probe (all if None); others are left zero

    Returns:
        Array shaped like tensor.data with the estimates
    """
    flat = tensor.data.reshape(-1)
    estimate = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            estimate[i] = (plus - minus) / (2 * h)
    return estimate.reshape(tensor.shape)
