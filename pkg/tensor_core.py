"""
Tensor Core for PanDense
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Covers the layer set the density network needs:
- convolution (same-size, stride 1), batch normalization, ReLU
- 2x2 max pooling and g x g region pooling (spatial pyramid pooling)
- linear layer, softmax, channel concatenation
- MSE and cross-entropy losses
plus an Adam optimizer and a finite-difference gradient checker.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CE_CLAMP = 1e-12

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """
    Dense n-dimensional array with an optional gradient slot.

    4-D tensors use batch x channels x height x width layout. Single precision
    is the default; pass dtype=np.float64 for verification runs.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx: Optional["Function"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    # Operator sugar; every operator routes through a Function so it is differentiable
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE), requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so the gradient matches the operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class for differentiable operations.

    forward() receives raw arrays and returns an array; backward() receives the
    gradient of the output and returns one gradient (or None) per input tensor.
    """

    def __init__(self):
        self.parents: Tuple[Tensor, ...] = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward not implemented")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__}.backward not implemented")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls()
        fn.parents = tensors
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        needs_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
        if needs_grad:
            out._ctx = fn
        return out


def backward(loss: Tensor) -> None:
    """
    Reverse-mode differentiation from a scalar loss.

    Leaf tensors with requires_grad accumulate d(loss)/d(leaf) into .grad;
    a tensor consumed several times receives the sum over all paths.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._ctx is None:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
        return

    order: List[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            node.accumulate_grad(grad)
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).astype(grad.dtype),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class GetItem(Function):
    def forward(self, a, index):
        self.in_shape, self.index = a.shape, index
        return np.ascontiguousarray(a[index])

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def add(a, b) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)
    return Mul.apply(a, b)


def tensor_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat shape mismatch along axis {axis}: {ref} vs {t.shape}")
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# Convolution (im2col)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    batch, channels, height, width = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * k * k)


class Conv2d(Function):
    def forward(self, x, kernel, bias, pad):
        batch, _, height, width = x.shape
        c_out, _, k, _ = kernel.shape
        self.x_shape, self.k, self.pad = x.shape, k, pad
        self.cols = _im2col(x, k, pad)
        self.w_mat = kernel.reshape(c_out, -1)
        out = self.cols @ self.w_mat.T + bias
        return np.ascontiguousarray(out.reshape(batch, height, width, c_out).transpose(0, 3, 1, 2))

    def backward(self, grad):
        batch, channels, height, width = self.x_shape
        k, pad = self.k, self.pad
        c_out = self.w_mat.shape[0]
        g = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        d_kernel = (g.T @ self.cols).reshape(c_out, channels, k, k)
        d_bias = g.sum(axis=0)
        d_cols = (g @ self.w_mat).reshape(batch, height, width, channels, k, k)
        d_padded = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                d_padded[:, :, i:i + height, j:j + width] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        d_x = d_padded[:, :, pad:pad + height, pad:pad + width]
        return d_x, d_kernel, d_bias


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: Optional[int] = None) -> Tensor:
    """
    Same-size, stride-1 convolution.

    Args:
        x: input [B, Cin, H, W]
        kernel: weights [Cout, Cin, k, k], k odd
        bias: [Cout]
        padding: must be (k - 1) / 2 when given

    Returns:
        Tensor [B, Cout, H, W]
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {c_out} output channels")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ValueError(f"conv2d padding must be {pad} for kernel {k} (same-size output), got {padding}")
    return Conv2d.apply(x, kernel, bias, pad=pad)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps):
        axes = (0, 2, 3)
        self.mean = x.mean(axis=axes)
        self.var = x.var(axis=axes)
        self.inv_std = 1.0 / np.sqrt(self.var + eps)
        self.x_hat = (x - self.mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma
        return self.x_hat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        d_gamma = (grad * self.x_hat).sum(axis=axes)
        d_beta = grad.sum(axis=axes)
        d_xhat = grad * self.gamma[None, :, None, None]
        d_x = (self.inv_std[None, :, None, None] / count) * (
            count * d_xhat
            - d_xhat.sum(axis=axes)[None, :, None, None]
            - self.x_hat * (d_xhat * self.x_hat).sum(axis=axes)[None, :, None, None]
        )
        return d_x, d_gamma, d_beta


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, mean, var, eps):
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma
        return self.x_hat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        d_x = grad * (self.gamma * self.inv_std)[None, :, None, None]
        return d_x, (grad * self.x_hat).sum(axis=axes), grad.sum(axis=axes)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalization; train mode also updates the running statistics."""
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects [B, C, H, W], got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError(f"batchnorm2d affine shape mismatch for {channels} channels")
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ValueError(f"batchnorm2d train mode needs at least 2 values per channel, got {count}")
        out = BatchNormTrain.apply(x, gamma, beta, eps=state.eps)
        fn = out._ctx
        if fn is not None:
            batch_mean, batch_var = fn.mean, fn.var
        else:
            batch_mean = x.data.mean(axis=(0, 2, 3))
            batch_var = x.data.var(axis=(0, 2, 3))
        unbiased = batch_var * (count / (count - 1))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * batch_mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
        return out
    if mode == "eval":
        return BatchNormEval.apply(
            x, gamma, beta,
            mean=state.running_mean.astype(x.dtype, copy=False),
            var=state.running_var.astype(x.dtype, copy=False),
            eps=state.eps,
        )
    raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Activations and pooling
# ---------------------------------------------------------------------------

class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class MaxPool2(Function):
    def forward(self, x):
        b, c, h, w = x.shape
        self.in_shape = x.shape
        blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
        self.argmax = blocks.argmax(axis=-1)[..., None]
        return np.take_along_axis(blocks, self.argmax, axis=-1)[..., 0]

    def backward(self, grad):
        b, c, h, w = self.in_shape
        blocks = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, self.argmax, grad[..., None], axis=-1)
        return (blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)


def band_edges(extent: int, parts: int) -> List[int]:
    """Boundaries floor(b * extent / parts) for b = 0..parts."""
    return [(b * extent) // parts for b in range(parts + 1)]


class RegionPool(Function):
    def forward(self, x, grid, mode):
        b, c, h, w = x.shape
        self.in_shape, self.mode = x.shape, mode
        self.rows, self.cols = band_edges(h, grid), band_edges(w, grid)
        out = np.empty((b, c, grid, grid), dtype=x.dtype)
        self.winners = {}
        for r in range(grid):
            r0, r1 = self.rows[r], self.rows[r + 1]
            for q in range(grid):
                c0, c1 = self.cols[q], self.cols[q + 1]
                cell = x[:, :, r0:r1, c0:c1]
                if mode == "avg":
                    out[:, :, r, q] = cell.mean(axis=(2, 3))
                else:
                    flat = cell.reshape(b, c, -1)
                    idx = flat.argmax(axis=-1)
                    self.winners[(r, q)] = idx
                    out[:, :, r, q] = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out

    def backward(self, grad):
        b, c, h, w = self.in_shape
        d_x = np.zeros(self.in_shape, dtype=grad.dtype)
        grid = len(self.rows) - 1
        for r in range(grid):
            r0, r1 = self.rows[r], self.rows[r + 1]
            for q in range(grid):
                c0, c1 = self.cols[q], self.cols[q + 1]
                if self.mode == "avg":
                    area = (r1 - r0) * (c1 - c0)
                    d_x[:, :, r0:r1, c0:c1] += grad[:, :, r, q][:, :, None, None] / area
                else:
                    cell = np.zeros((b, c, (r1 - r0) * (c1 - c0)), dtype=grad.dtype)
                    np.put_along_axis(cell, self.winners[(r, q)][..., None], grad[:, :, r, q][..., None], axis=-1)
                    d_x[:, :, r0:r1, c0:c1] += cell.reshape(b, c, r1 - r0, c1 - c0)
        return (d_x,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def max_pool2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"max_pool2 expects [B, C, H, W], got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool2 needs even height and width, got {x.shape[2]}x{x.shape[3]}")
    return MaxPool2.apply(x)


def region_avg_pool(x: Tensor, grid: int, mode: str = "avg") -> Tensor:
    """
    Pool each channel over a grid x grid partition into near-equal bands.

    Output is [B, C, grid, grid] whatever the input size; mode="max" takes the
    cell maximum instead of the mean.
    """
    if x.ndim != 4:
        raise ValueError(f"region_avg_pool expects [B, C, H, W], got {x.shape}")
    if grid < 1:
        raise ValueError(f"region_avg_pool grid must be >= 1, got {grid}")
    if grid > x.shape[2] or grid > x.shape[3]:
        raise ValueError(f"region_avg_pool grid {grid} larger than input {x.shape[2]}x{x.shape[3]}")
    if mode not in ("avg", "max"):
        raise ValueError(f"region pooling mode must be 'avg' or 'max', got {mode!r}")
    return RegionPool.apply(x, grid=grid, mode=mode)


# ---------------------------------------------------------------------------
# Linear, softmax, losses
# ---------------------------------------------------------------------------

class Linear(Function):
    def forward(self, x, weight, bias):
        self.x, self.weight = x, weight
        return x @ weight.T + bias

    def backward(self, grad):
        return grad @ self.weight, grad.T @ self.x, grad.sum(axis=0)


class Softmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


class MSELoss(Function):
    def forward(self, pred, target):
        self.diff = pred - target
        self.batch = pred.shape[0]
        return np.asarray((self.diff ** 2).sum() / self.batch, dtype=pred.dtype)

    def backward(self, grad):
        d_pred = grad * 2.0 * self.diff / self.batch
        return d_pred, -d_pred


class CrossEntropyLoss(Function):
    def forward(self, probs, classes):
        rows = np.arange(probs.shape[0])
        picked = probs[rows, classes]
        self.rows, self.classes, self.shape = rows, classes, probs.shape
        self.picked = picked
        self.clamped = picked < CE_CLAMP
        return np.asarray(-np.log(np.maximum(picked, CE_CLAMP)).mean(), dtype=probs.dtype)

    def backward(self, grad):
        d_probs = np.zeros(self.shape, dtype=grad.dtype)
        safe = np.where(self.clamped, 1.0, self.picked)
        d_probs[self.rows, self.classes] = np.where(self.clamped, 0.0, -1.0 / safe) / self.shape[0]
        return (grad * d_probs,)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return Linear.apply(x, weight, bias)


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"softmax expects [B, O], got {x.shape}")
    return Softmax.apply(x)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of squared residuals per sample, averaged over the batch."""
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    return MSELoss.apply(pred, target)


def cross_entropy_loss(probs: Tensor, classes) -> Tensor:
    """Mean of -log(probs[class]) over the batch, probabilities clamped at 1e-12."""
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or classes.shape[0] != probs.shape[0]:
        raise ValueError(f"cross_entropy_loss expects [B, N] probs and B classes, got {probs.shape}, {classes.shape}")
    n = probs.shape[1]
    if np.any(classes < 0) or np.any(classes >= n):
        raise ValueError(f"cross_entropy_loss class index out of range [0, {n}): {classes.tolist()}")
    return CrossEntropyLoss.apply(probs, classes=classes)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Module:
    """
    Container of parameters, buffers and child modules.

    Attribute insertion order defines parameter names and checkpoint order.
    """

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in self.__dict__.items():
            if isinstance(value, (Module, Tensor, BatchNormState)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, BatchNormState):
                yield f"{name}.running_mean", value.running_mean
                yield f"{name}.running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, value in self._children():
            if isinstance(value, BatchNormState):
                value.running_mean = value.running_mean.astype(dtype)
                value.running_var = value.running_var.astype(dtype)
            elif isinstance(value, Module):
                value.to_dtype(dtype)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into matching entries; returns the names that were loaded."""
        loaded = []
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        for name, target in targets.items():
            if name not in state:
                if strict:
                    raise ValueError(f"state is missing entry {name!r}")
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ValueError(f"entry {name!r} has shape {value.shape}, expected {target.shape}")
            target[...] = value
            loaded.append(name)
        if strict:
            unknown = sorted(set(state) - set(targets))
            if unknown:
                raise ValueError(f"state has unknown entries: {unknown}")
        return loaded

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class ConvLayer(Module):
    """Same-size convolution; convs feeding a batch norm are built with bias=False."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE,
                 bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.weight = Parameter(he_normal(rng, (c_out, c_in, kernel_size, kernel_size), c_in * kernel_size ** 2, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        bias = self.bias if self.bias is not None else Tensor(np.zeros(self.weight.shape[0], dtype=x.dtype))
        return conv2d(x, self.weight, bias)


class BatchNormLayer(Module):
    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = BatchNormState(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.stats, mode="train" if self.training else "eval")


class LinearLayer(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> bool:
    """
    One bias-corrected Adam update with decoupled weight decay.

    Parameters whose gradient is None are left untouched. Returns False (and
    logs a warning) when no gradient is present at all.
    """
    if not any(g is not None for g in grads):
        logger.warning("⚠️ Adam step skipped: no gradients populated")
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if i not in state.m:
            state.m[i] = np.zeros_like(param.data)
            state.v[i] = np.zeros_like(param.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        if state.weight_decay:
            param.data *= (1.0 - state.lr * state.weight_decay)
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)
    return True


class Adam:
    """Adam over a fixed parameter list; defaults lr 1e-5 and weight decay 1e-4."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-5, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self) -> bool:
        return adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare analytic gradients with central finite differences.

    Args:
        fn: scalar-valued function of the inputs (double precision expected)
        inputs: tensors to differentiate; each must have requires_grad set
        eps: finite-difference step, must be > 0
        max_coords: optional cap of sampled coordinates per input
        rng: generator used for coordinate sampling

    Returns:
        max over checked coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if eps <= 0:
        raise ValueError(f"grad_check eps must be positive, got {eps}")
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a_grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ValueError("grad_check inputs must be contiguous")
            a_flat = a_grad.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                original = flat[i]
                flat[i] = original + eps
                f_plus = fn(*inputs).item()
                flat[i] = original - eps
                f_minus = fn(*inputs).item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                analytic_i = float(a_flat[i])
                err = abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
