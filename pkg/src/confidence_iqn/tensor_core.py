"""
Dense Tensor Core

A minimal n-dimensional tensor on top of numpy with reverse-mode automatic
differentiation. Only the operations the classifier and loss-estimation models
need are provided, and shapes are never broadcast implicitly: every mismatch is a
DimensionError naming both shapes.

Conventions:
    - conv2d is a cross-correlation (the kernel is not flipped), NCHW layout.
    - dropout is inverted dropout: survivors are scaled by 1/(1-p) in training,
      eval mode is the identity.
    - gradients accumulate: calling backward twice without zero_grad doubles them.
    - precision is build-wide; float32 by default, float64 inside `precision(np.float64)`.
"""

import contextlib
import logging
import zlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE: type[np.floating] = np.float32
_GRAD_ENABLED = True


def default_dtype() -> type[np.floating]:
    """The floating type new tensors and parameters are created with."""
    return _DEFAULT_DTYPE


def set_precision(dtype) -> None:
    """Set the build-wide floating precision (float32 or float64)."""
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype).type
    if resolved not in (np.float32, np.float64):
        raise ParameterError(f"precision must be float32 or float64, got {np.dtype(dtype)}")
    _DEFAULT_DTYPE = resolved


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default precision (gradient checks run in float64)."""
    previous = _DEFAULT_DTYPE
    set_precision(dtype)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forwards without recording backpropagation records."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# ── Random numbers ───────────────────────────────────────────────────


def _stream_key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """
    Deterministic random stream.

    Backed by numpy's PCG64 bit generator seeded through a SeedSequence, so the
    same (seed, stream) pair yields the same samples on every platform. Child
    streams are derived by name, which keeps e.g. the shuffle order independent
    of how many dropout masks were drawn.

    Caveat: uniform and integer draws are bit-identical everywhere; values pushed
    through transcendental functions (cos, exp) may differ in the last ulp
    between libm implementations.
    """

    def __init__(self, seed: int, *, stream: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream = stream
        sequence = np.random.SeedSequence(entropy=seed, spawn_key=stream)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *names: str | int) -> "Rng":
        """Derive an independent stream identified by `names`."""
        return Rng(self.seed, stream=self.stream + tuple(_stream_key(n) for n in names))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


# ── Tensor ───────────────────────────────────────────────────────────


class Tensor:
    """
    n-dimensional array with optional gradient tracking.

    Attributes:
        data: contiguous numpy array holding the values.
        grad: gradient buffer with the shape of `data`, populated by backward.
        requires_grad: whether gradients should flow into this tensor.
        creator: the Function that produced this tensor (its backprop record),
            None for leaves and for tensors built under no_grad.
    """

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
        _creator: "Function | None" = None,
    ):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            array = data
        else:
            array = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = array if array.flags.c_contiguous else np.ascontiguousarray(array)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.creator = _creator

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A graph-free view of the same values (safe to hand to other threads)."""
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise_mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, *, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    """Wrap data that never needs a gradient (targets, tau features, masks)."""
    return Tensor(data, dtype=dtype)


class Function:
    """
    Backpropagation record of one differentiable operation.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _creator=func if requires_grad else None)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _require_ndim(op: str, t: Tensor, ndim: int) -> None:
    if t.ndim != ndim:
        raise DimensionError(f"{op}: expected a {ndim}-d tensor, got shape {t.shape}")


# ── Elementwise ──────────────────────────────────────────────────────


class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class _ElementwiseMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class _Scale(Function):
    def forward(self, x, *, factor: float):
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class _Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class _Mask(Function):
    def forward(self, x, *, mask: np.ndarray):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _Add.apply(a, scale(b, -1.0))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("elementwise_mul", a, b)
    return _ElementwiseMul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return _Scale.apply(x, factor=float(factor))


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


def dropout(x: Tensor, p: float, *, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = rng.uniform(size=x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return _Mask.apply(x, mask=mask)


# ── Linear algebra ───────────────────────────────────────────────────


class _MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _MatMul.apply(a, b)


class _AddBias(Function):
    def forward(self, x, bias):
        self.axes = tuple(i for i in range(x.ndim) if i != 1)
        view = (1, -1) + (1,) * (x.ndim - 2)
        return x + bias.reshape(view)

    def backward(self, grad):
        return grad, grad.sum(axis=self.axes)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (axis 1) bias; the only named broadcast in the core."""
    if x.ndim < 2 or bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match axis 1 of {x.shape}")
    return _AddBias.apply(x, bias)


# ── Convolution and pooling ──────────────────────────────────────────


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(b, c, h, w) -> (b, c, h_out, w_out, k, k) strided view."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(
    grad_windows: np.ndarray, shape: tuple[int, ...], k: int, stride: int
) -> np.ndarray:
    """Adjoint of `_windows`: accumulate (b, c, h_out, w_out, k, k) back onto `shape`."""
    out = np.zeros(shape, dtype=grad_windows.dtype)
    h_out, w_out = grad_windows.shape[2:4]
    for i in range(k):
        for j in range(k):
            out[
                :,
                :,
                i : i + stride * (h_out - 1) + 1 : stride,
                j : j + stride * (w_out - 1) + 1 : stride,
            ] += grad_windows[:, :, :, :, i, j]
    return out


class _Conv2d(Function):
    def forward(self, x, kernel, *, stride: int, padding: int):
        self.padding = padding
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        b, c, _, _ = x.shape
        out_channels, _, k, _ = kernel.shape
        windows = _windows(x, k, stride)
        h_out, w_out = windows.shape[2:4]
        # rows: (b, h_out, w_out), columns: (c, k, k)
        self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h_out * w_out, c * k * k)
        self.kernel = kernel
        self.padded_shape = x.shape
        self.stride = stride
        out = self.cols @ kernel.reshape(out_channels, -1).T
        return out.reshape(b, h_out, w_out, out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        b, out_channels, h_out, w_out = grad.shape
        _, c, k, _ = self.kernel.shape
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_kernel = (grad_rows.T @ self.cols).reshape(self.kernel.shape)
        grad_cols = grad_rows @ self.kernel.reshape(out_channels, -1)
        grad_windows = grad_cols.reshape(b, h_out, w_out, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        grad_x = _scatter_windows(grad_windows, self.padded_shape, k, self.stride)
        if self.padding:
            p = self.padding
            grad_x = grad_x[:, :, p:-p, p:-p]
        return grad_x, grad_kernel


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Valid 2-d cross-correlation (no kernel flip) of NCHW input with an OIkk kernel.

    Output spatial size is (h + 2*padding - k) // stride + 1.
    """
    _require_ndim("conv2d", x, 4)
    _require_ndim("conv2d", kernel, 4)
    if kernel.shape[1] != x.shape[1] or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} does not fit input {x.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    k = kernel.shape[2]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kernel.shape} is larger than input {x.shape}")
    return _Conv2d.apply(x, kernel, stride=stride, padding=padding)


class _MaxPool2d(Function):
    def forward(self, x, *, kernel: int, stride: int):
        windows = _windows(x, kernel, stride)
        b, c, h_out, w_out = windows.shape[:4]
        flat = windows.reshape(b, c, h_out, w_out, kernel * kernel)
        self.argmax = flat.argmax(axis=-1)
        self.shape, self.kernel, self.stride = x.shape, kernel, stride
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k = self.kernel
        grad_windows = np.zeros(grad.shape + (k, k), dtype=grad.dtype)
        for index in range(k * k):
            i, j = divmod(index, k)
            grad_windows[..., i, j] = np.where(self.argmax == index, grad, 0)
        return (_scatter_windows(grad_windows, self.shape, k, self.stride),)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    _require_ndim("max_pool2d", x, 4)
    stride = stride or kernel
    if kernel < 1 or kernel > x.shape[2] or kernel > x.shape[3]:
        raise DimensionError(f"max_pool2d: window {kernel} does not fit input {x.shape}")
    return _MaxPool2d.apply(x, kernel=kernel, stride=stride)


# ── Shape and reductions ─────────────────────────────────────────────


class _Reshape(Function):
    def forward(self, x, *, shape):
        self.original = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.original),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return _Reshape.apply(x, shape=shape)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


class _TileRows(Function):
    def forward(self, x, *, repeats: int):
        self.repeats = repeats
        return np.repeat(x, repeats, axis=0)

    def backward(self, grad):
        rows = grad.shape[0] // self.repeats
        return (grad.reshape((rows, self.repeats) + grad.shape[1:]).sum(axis=1),)


def tile_rows(x: Tensor, repeats: int) -> Tensor:
    """Repeat each row `repeats` times in place: row i*repeats + j is x[i]."""
    if repeats < 1:
        raise ParameterError(f"tile_rows: repeats must be >= 1, got {repeats}")
    return _TileRows.apply(x, repeats=repeats)


class _Sum(Function):
    def forward(self, x, *, axis):
        self.shape, self.axis = x.shape, axis
        return np.asarray(x.sum(axis=axis))

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class _Mean(_Sum):
    def forward(self, x, *, axis):
        self.count = x.size if axis is None else x.shape[axis]
        return super().forward(x, axis=axis) / x.dtype.type(self.count)

    def backward(self, grad):
        (full,) = super().backward(grad)
        return (full / full.dtype.type(self.count),)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return _Sum.apply(x, axis=axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return _Mean.apply(x, axis=axis)


class _LogSoftmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=-1, keepdims=True),)


def log_softmax(x: Tensor) -> Tensor:
    """Log-probabilities over the last axis."""
    _require_ndim("log_softmax", x, 2)
    return _LogSoftmax.apply(x)


class _Pick(Function):
    def forward(self, x, *, indices: np.ndarray):
        self.shape, self.indices = x.shape, indices
        return x[np.arange(x.shape[0]), indices]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[np.arange(self.shape[0]), self.indices] = grad
        return (out,)


def pick(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select x[i, indices[i]] for every row i."""
    _require_ndim("pick", x, 2)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (x.shape[0],):
        raise DimensionError(f"pick: indices shape {indices.shape} does not match rows of {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[1]):
        raise ContractError(f"pick: index out of range for {x.shape[1]} columns")
    return _Pick.apply(x, indices=indices)


# ── Backpropagation ──────────────────────────────────────────────────


def _topological_order(root: Tensor) -> list[Tensor]:
    """Post-order over the graph below `root` (inputs before consumers)."""
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
        if node.creator is not None:
            for parent in node.creator.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf that requires grad.

    Raises:
        ContractError: if `loss` is not a single-element tensor or carries no graph.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if node.creator is None:
            if grad is None:
                grad = np.zeros_like(node.data)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        if grad is None:
            continue
        for parent, parent_grad in zip(node.creator.inputs, node.creator.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ── Gradient checking ────────────────────────────────────────────────


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients with central finite differences.

    The output of `fn` is projected onto fixed random weights so any output
    shape can be checked. Returns the largest max-norm relative error over all
    inputs that require grad.
    """
    projection: np.ndarray | None = None

    def objective() -> Tensor:
        nonlocal projection
        out = fn(*inputs)
        if projection is None:
            projection = Rng(seed).normal(size=out.shape).astype(out.dtype)
        return sum(elementwise_mul(out, constant(projection)))

    for t in inputs:
        t.zero_grad()
    backward(objective())

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        numeric = np.zeros_like(t.data)
        flat, numeric_flat = t.data.reshape(-1), numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                upper = objective().item()
                flat[i] = original - eps
                lower = objective().item()
                flat[i] = original
                numeric_flat[i] = (upper - lower) / (2 * eps)
        analytic = t.grad
        scale_ = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale_))
    return worst
