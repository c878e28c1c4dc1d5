"""
Tensor Core
Dense numpy-backed tensors with reverse-mode automatic differentiation,
carrying only the operations the few-shot segmentation pipeline needs.
"""

import functools
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# Serialization header
TENSOR_MAGIC = b"PLKA"
TENSOR_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand extents do not fit an operation"""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf"""


class GraphError(RuntimeError):
    """Raised for malformed computation graphs"""


class ConvSpecError(ValueError):
    """Raised for invalid convolution specifications"""


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        """Wrap an array; float inputs keep their width, everything else becomes float32"""
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.array(array, dtype=dtype)
        self.data.flags.writeable = False
        self.requires_grad = bool(requires_grad)
        self.grad = None

        # Graph bookkeeping
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.data.flags.writeable = False
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = op
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int = 3
    dilation: int = 1
    groups: str = "depthwise"
    stride: int = 1

    def __post_init__(self):
        if self.groups not in ("depthwise", "pointwise"):
            raise ConvSpecError(f"groups must be 'depthwise' or 'pointwise', got {self.groups!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConvSpecError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise ConvSpecError(f"dilation must be >= 1, got {self.dilation}")
        if self.stride < 1:
            raise ConvSpecError(f"stride must be >= 1, got {self.stride}")
        if self.groups == "pointwise" and (self.kernel_size != 1 or self.dilation != 1):
            raise ConvSpecError("pointwise convolutions use kernel_size=1 and dilation=1")

    @property
    def padding(self):
        return self.dilation * (self.kernel_size - 1) // 2


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def as_tensor(value, like=None):
    """Lift numbers and arrays into constant tensors matching a reference dtype"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to an operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Elementwise algebra
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b):
    """Hadamard product with numpy broadcasting"""
    a, b = _binary_operands(a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), _backward, "mul")


def div(a, b):
    a, b = _binary_operands(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def _backward(g):
        grad_a = _unbroadcast(g / b.data, a.shape)
        grad_b = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return grad_a, grad_b

    return Tensor._from_op(out, (a, b), _backward, "div")


def neg(x):
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g / x.data,), "log")


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def _backward(g):
        # zero subgradient at the origin
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0),)

    return Tensor._from_op(out, (x,), _backward, "sqrt")


def clamp(x, low=None, high=None):
    """Clip into [low, high]; gradient passes only where the input was inside"""
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(out, (x,), lambda g: (g * inside,), "clamp")


def maximum(x, floor):
    """Elementwise max against a constant floor"""
    out = np.maximum(x.data, floor).astype(x.dtype, copy=False)
    above = x.data >= floor
    return Tensor._from_op(out, (x,), lambda g: (g * above,), "maximum")


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def tensor_sum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), _backward, "sum")


def tensor_mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def erf(x):
    """Error function on numpy arrays (cephes rational approximations, near machine precision)"""
    return special.erf(np.asarray(x))


def _gelu_derivative(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def gelu(x):
    """Exact-form GELU, 0.5 * x * (1 + erf(x / sqrt(2)))"""
    out = (0.5 * x.data * (1.0 + erf(x.data / math.sqrt(2.0)))).astype(x.dtype, copy=False)

    def _backward(g):
        # looked up at call time so the gradient check can swap it
        return (g * _gelu_derivative(x.data),)

    return Tensor._from_op(out, (x,), _backward, "gelu")


def sigmoid(x):
    """1 / (1 + exp(-z)), evaluated as exp(z) / (1 + exp(z)) for negative z"""
    z = x.data
    decay = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay)).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# Convolutions, resampling, dense heads
# ---------------------------------------------------------------------------

def _conv_output_extent(extent, stride):
    return (extent - 1) // stride + 1


def conv2d_depthwise(x, weights, spec=None):
    """Per-channel cross-correlation with zero 'same' padding, then stride subsampling"""
    spec = spec or ConvSpec()
    if spec.groups != "depthwise":
        raise ConvSpecError("conv2d_depthwise needs a depthwise ConvSpec")
    if x.ndim != 3:
        raise ShapeError(f"expected C×H×W input, got {x.shape}")
    k, d, s, pad = spec.kernel_size, spec.dilation, spec.stride, spec.padding
    if weights.shape != (x.shape[0], k, k):
        raise ShapeError(f"depthwise weights {weights.shape} do not match input {x.shape} and kernel {k}")

    channels, height, width = x.shape
    out_h, out_w = _conv_output_extent(height, s), _conv_output_extent(width, s)
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((channels, out_h, out_w), dtype=np.result_type(x.dtype, weights.dtype))

    def _window(i, j):
        return (slice(None),
                slice(i * d, i * d + s * (out_h - 1) + 1, s),
                slice(j * d, j * d + s * (out_w - 1) + 1, s))

    for i in range(k):
        for j in range(k):
            out += weights.data[:, i, j][:, None, None] * padded[_window(i, j)]

    def _backward(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(weights.data)
        for i in range(k):
            for j in range(k):
                window = _window(i, j)
                grad_w[:, i, j] = np.einsum("chw,chw->c", g, padded[window])
                grad_padded[window] += weights.data[:, i, j][:, None, None] * g
        grad_x = grad_padded[:, pad:pad + height, pad:pad + width]
        return grad_x, grad_w

    return Tensor._from_op(out, (x, weights), _backward, "conv2d_depthwise")


def conv2d_pointwise(x, weights, bias):
    """1×1 convolution: a per-pixel linear map across channels"""
    if x.ndim != 3:
        raise ShapeError(f"expected C×H×W input, got {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise weights {weights.shape} do not match {x.shape[0]} input channels")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"pointwise bias {bias.shape} does not match {weights.shape[0]} output channels")

    channels, height, width = x.shape
    flat = x.data.reshape(channels, height * width)
    out = (weights.data @ flat + bias.data[:, None]).reshape(weights.shape[0], height, width)

    def _backward(g):
        g_flat = g.reshape(weights.shape[0], height * width)
        grad_x = (weights.data.T @ g_flat).reshape(x.shape)
        grad_w = g_flat @ flat.T
        return grad_x, grad_w, g_flat.sum(axis=1)

    return Tensor._from_op(out, (x, weights, bias), _backward, "conv2d_pointwise")


@functools.lru_cache(maxsize=64)
def _resize_weights(in_extent, out_extent, dtype_name):
    src = np.maximum((np.arange(out_extent) + 0.5) * (in_extent / out_extent) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_extent - 1)
    i1 = np.minimum(i0 + 1, in_extent - 1)
    frac = src - i0
    matrix = np.zeros((out_extent, in_extent), dtype=np.dtype(dtype_name))
    rows = np.arange(out_extent)
    np.add.at(matrix, (rows, i0), 1.0 - frac)
    np.add.at(matrix, (rows, i1), frac)
    matrix.flags.writeable = False
    return matrix


def resize_matrix(in_extent, out_extent, dtype=np.float64):
    """Interpolation weights along one axis, half-pixel centers (align_corners=False)

    Matrices are cached per (extents, dtype) and returned read-only.
    """
    return _resize_weights(int(in_extent), int(out_extent), np.dtype(dtype).name)


def bilinear_resize(x, out_h, out_w):
    """Resample C×H×W to C×out_h×out_w; a same-size request returns x itself"""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target extent must be positive, got {out_h}×{out_w}")
    if x.ndim != 3:
        raise ShapeError(f"expected C×H×W input, got {x.shape}")
    _, height, width = x.shape
    if (height, width) == (out_h, out_w):
        return x

    rows = resize_matrix(height, out_h, dtype=x.dtype)
    cols = resize_matrix(width, out_w, dtype=x.dtype)
    out = rows @ x.data @ cols.T

    def _backward(g):
        return (rows.T @ g @ cols,)

    return Tensor._from_op(out, (x,), _backward, "bilinear_resize")


def linear(x, weights, bias):
    """Scalar affine head, weights 1×D and bias of extent 1"""
    if x.ndim != 1 or weights.shape != (1, x.shape[0]) or bias.shape != (1,):
        raise ShapeError(f"linear head shapes do not fit: x {x.shape}, weights {weights.shape}, bias {bias.shape}")
    out = weights.data @ x.data + bias.data

    def _backward(g):
        return weights.data.T @ g, np.outer(g, x.data), g

    return Tensor._from_op(out, (x, weights, bias), _backward, "linear")


def global_avg_pool(x):
    if x.ndim != 3:
        raise ShapeError(f"expected C×H×W input, got {x.shape}")
    return tensor_mean(x, axis=(1, 2))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root):
    """Iterative post-order walk; a node reached while still open closes a cycle"""
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = "done"
            order.append(node)
            continue
        if state.get(key) == "done":
            continue
        if state.get(key) == "open":
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = "open"
        stack.append((node, True))
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            parent_state = state.get(id(parent))
            if parent_state == "open":
                raise GraphError(f"cycle detected at {parent!r}")
            if parent_state is None:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf"""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss was not produced by a recorded computation")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            grad = np.asarray(grad, dtype=node.dtype).reshape(node.shape)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if not parent.requires_grad or parent_grad is None:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def tensor_to_bytes(x):
    """PLKA blob: magic, u32 version, u32 rank, u32 extents, little-endian float32 payload"""
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_FORMAT_VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + np.ascontiguousarray(x.data, dtype="<f4").tobytes()


def tensor_from_bytes(blob, requires_grad=False):
    if blob[:4] != TENSOR_MAGIC:
        raise ShapeError("tensor blob has a bad magic number")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != TENSOR_FORMAT_VERSION:
        raise ShapeError(f"unsupported tensor format version {version}")
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return Tensor(payload.reshape(shape).astype(np.float32), requires_grad=requires_grad)
