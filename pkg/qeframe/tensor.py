"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable op produces its output through `_result`, which records
the parent tensors and a `grad_fn` mapping the output gradient to one gradient
per parent. `Tensor.backward` walks the recorded graph in reverse topological
order, visiting each node exactly once.

Weights and activations default to float32; reductions accumulate in float64.
Wrap code in `default_dtype(np.float64)` to build 64-bit tensors (gradient
checks run that way).
"""

import contextlib
import math
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from qeframe.exc import ContractError, DegenerateInputError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly created tensors.

    Parameters:
        dtype: A numpy floating dtype, e.g. np.float64.
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. for evaluation and inference."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-dimensional real array with an optional gradient.

    Tensors created directly are leaves; tensors returned by ops carry the
    graph needed by `backward` when any input requires a gradient.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: str = "",
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = ""
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate `.grad` on every tensor reachable from this scalar loss.

        Gradients accumulate: calling backward twice without `zero_grad`
        doubles them.

        Raises:
            ContractError: If the tensor is not a scalar or has no graph.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward called on a tensor that does not require grad")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._grad_fn is None:
                continue
            for parent, parent_grad in zip(node._parents, node._grad_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                key = id(parent)
                pending[key] = (
                    pending[key] + parent_grad if key in pending else parent_grad
                )

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return select(self, index)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum_along_axis(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean_along_axis(self, axis, keepdims)

    def max(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        return max_along_axis(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def relu(self) -> "Tensor":
        return relu(self)

    def gelu(self) -> "Tensor":
        return gelu(self)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _as_pair(a, b) -> Tuple[Tensor, Tensor]:
    """Wrap constants so they take the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            return _as_tensor(a), _as_tensor(b)
        return _as_tensor(a, b), b
    return a, _as_tensor(b, a)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._grad_fn = grad_fn if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _broadcast_shape(a, b, "div")

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), grad_fn, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    def grad_fn(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _result(x.data**exponent, (x,), grad_fn, f"pow{exponent}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        ShapeError: If the inner dimensions disagree; names both shapes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), grad_fn, "transpose")


def select(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing; gradients scatter back with `np.add.at`."""

    def grad_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(x.data[index]), (x,), grad_fn, "select")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `weight` for integer `ids` of any shape.

    Raises:
        ContractError: If an id is negative or not below the number of rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(
            f"token id out of range [0, {weight.shape[0]}): min={ids.min()}, max={ids.max()}"
        )

    def grad_fn(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(weight.data[ids], (weight,), grad_fn, "embedding")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true with a constant; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}")

    def grad_fn(g):
        return (np.where(mask, 0.0, g).astype(g.dtype),)

    data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _result(data, (x,), grad_fn, "masked_fill")


def sum_along_axis(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data), (x,), grad_fn, "sum")


def mean_along_axis(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    data = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(data), (x,), grad_fn, "mean")


def max_along_axis(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along an axis; the gradient goes to the lowest-index argmax."""
    axis = axis % x.ndim
    argmax = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, argmax, axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, argmax, g, axis=axis)
        return (grad,)

    return _result(data, (x,), grad_fn, "max")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _result(data, tuple(tensors), grad_fn, "concat")


def relu(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0), (x,), grad_fn, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using the error function."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result((x.data * cdf).astype(x.dtype), (x,), grad_fn, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; `-inf` entries receive probability 0.

    Exponentials and sums are taken in float64 and the result is cast back to
    the input dtype, so rows sum to 1 within 1e-12 for float64 inputs and
    within about 1e-6 (float32 rounding) for float32 inputs.
    """
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted.astype(np.float64))
    out = (exps / np.sum(exps, axis=axis, keepdims=True)).astype(x.dtype)

    def grad_fn(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        return (out * (g - inner.astype(g.dtype)),)

    return _result(out, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then apply gain and bias.

    Statistics are computed in float64. A constant row normalises to zeros.
    """
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}"
        )
    xd = x.data.astype(np.float64)
    centered = xd - xd.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = (normed * gain.data + bias.data).astype(x.dtype)

    def grad_fn(g):
        gd = g.astype(np.float64)
        g_normed = gd * gain.data
        grad_x = (inv_std / d) * (
            d * g_normed
            - g_normed.sum(axis=-1, keepdims=True)
            - normed * (g_normed * normed).sum(axis=-1, keepdims=True)
        )
        grad_gain = (gd * normed).reshape(-1, d).sum(axis=0)
        grad_bias = gd.reshape(-1, d).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return _result(out, (x, gain, bias), grad_fn, "layer_norm")


def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between vectors along `axis`, clipped to [-1, 1].

    Identical inputs give exactly 1.0: the dot product and both squared norms
    are reduced in the same order, and sqrt(n * n) == n in IEEE arithmetic.

    Raises:
        DegenerateInputError: If any vector has zero norm.
    """
    _broadcast_shape(a, b, "cosine")
    ad, bd = a.data.astype(np.float64), b.data.astype(np.float64)
    dot = np.sum(ad * bd, axis=axis)
    norm_a2 = np.sum(ad * ad, axis=axis)
    norm_b2 = np.sum(bd * bd, axis=axis)
    if np.any(norm_a2 == 0) or np.any(norm_b2 == 0):
        raise DegenerateInputError("cosine is undefined for a zero vector")
    denom = np.sqrt(norm_a2 * norm_b2)
    cos = dot / denom

    def grad_fn(g):
        ge = np.expand_dims(g.astype(np.float64), axis)
        de = np.expand_dims(denom, axis)
        ce = np.expand_dims(cos, axis)
        grad_a = ge * (bd / de - ce * ad / np.expand_dims(norm_a2, axis))
        grad_b = ge * (ad / de - ce * bd / np.expand_dims(norm_b2, axis))
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.clip(cos, -1.0, 1.0).astype(a.dtype), (a, b), grad_fn, "cosine")


def mse(predictions: Tensor, labels: Tensor) -> Tensor:
    """Mean of squared differences."""
    diff = predictions - labels
    return mean_along_axis(diff * diff)
