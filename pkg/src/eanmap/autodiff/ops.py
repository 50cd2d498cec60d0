"""
Differentiable operations.

Elementwise binary ops require identical shapes; use `expand` to broadcast
explicitly. Only `matmul` broadcasts, and only over leading batch extents.
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.special import erf, expit

from eanmap.autodiff.tensor import Tensor, make_result
from eanmap.errors import ContractError, DimensionError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    Array = NDArray[np.floating[Any]]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand)")


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape, strict=True)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * factor, (x,), "scale", lambda g: (g * factor,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    return make_result(x.data + value, (x,), "add_scalar", lambda g: (g,))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast size-1 extents of `x` to `shape` (same rank required)."""
    target = tuple(shape)
    if len(target) != x.ndim or any(s not in (1, t) for s, t in zip(x.shape, target, strict=True)):
        raise DimensionError(f"cannot expand {x.shape} to {target}")
    data = np.broadcast_to(x.data, target)
    return make_result(data, (x,), "expand", lambda g: (_reduce_to(g, x.shape),))


# --- reductions and shape ---------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return make_result(
        np.asarray(x.data.sum()), (x,), "sum_all", lambda g: (np.broadcast_to(g, x.shape),)
    )


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = _axis(axis, x.ndim)

    def _backward(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape),)

    return make_result(x.data.sum(axis=ax, keepdims=keepdims), (x,), "sum_axis", _backward)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = _axis(axis, x.ndim)
    count = x.shape[ax]

    def _backward(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, x.shape),)

    return make_result(x.data.mean(axis=ax, keepdims=keepdims), (x,), "mean_axis", _backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat_axis needs at least one tensor")
    ax = _axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape, strict=True)) if i != ax
        ):
            raise DimensionError(
                f"concat_axis: {t.shape} incompatible with {tensors[0].shape} on axis {ax}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(
        data, tuple(tensors), "concat_axis", lambda g: tuple(np.split(g, bounds, axis=ax))
    )


def split_axis(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split into consecutive pieces of the given extents along `axis`."""
    ax = _axis(axis, x.ndim)
    if sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[ax]}")
    pieces: list[Tensor] = []
    start = 0
    for size in sizes:
        index = (slice(None),) * ax + (slice(start, start + size),)

        def _backward(g: Array, index: tuple[slice, ...] = index) -> tuple[Array]:
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(make_result(x.data[index], (x,), "split_axis", _backward))
        start += size
    return pieces


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return make_result(data, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    a1, a2 = _axis(axis1, x.ndim), _axis(axis2, x.ndim)
    return make_result(
        np.swapaxes(x.data, a1, a2), (x,), "swapaxes", lambda g: (np.swapaxes(g, a1, a2),)
    )


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2 needs rank >= 2, got {x.shape}")
    return swapaxes(x, -1, -2)


def take(x: Tensor, indices: Sequence[int] | NDArray[np.integer[Any]], axis: int = 0) -> Tensor:
    """Gather slices along `axis`; repeated indices accumulate gradient."""
    ax = _axis(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise DimensionError(f"take: index out of range for extent {x.shape[ax]}")

    def _backward(g: Array) -> tuple[Array]:
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        return (full,)

    return make_result(np.take(x.data, idx, axis=ax), (x,), "take", _backward)


# --- elementwise nonlinearities -------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return make_result(x.data * cdf, (x,), "gelu", lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    """log(x / (1 - x)) with x clamped to [eps, 1 - eps]; zero gradient where clamped."""
    clamped = np.clip(x.data, eps, 1.0 - eps)
    inside = (x.data > eps) & (x.data < 1.0 - eps)
    y = np.log(clamped / (1.0 - clamped))
    return make_result(
        y, (x,), "inverse_sigmoid", lambda g: (g * inside / (clamped * (1.0 - clamped)),)
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p == 0 is the identity."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout probability must be < 1, got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


# --- normalization and attention primitives --------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis. NaN inputs propagate NaN."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_result(
        y, (x,), "softmax", lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    )


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    return make_result(
        y, (x,), "log_softmax", lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)
    )


def layer_norm_lastdim(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis row to zero mean and unit variance (no affine)."""
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv_std

    def _backward(g: Array) -> tuple[Array]:
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - y * gy_mean),)

    return make_result(y, (x,), "layer_norm", _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch extents broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from e

    def _backward(g: Array) -> tuple[Array, Array]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), "matmul", _backward)


def bilinear_sample(grid: Tensor, points: Tensor) -> Tensor:
    """
    Sample a C x H x W grid at P normalized (x, y) points, returning P x C.

    x runs along W and y along H; cell (i, j) is centered at
    ((j + 0.5) / W, (i + 0.5) / H). Points outside the grid are clamped to
    the border cells, where the coordinate gradient is zero.
    """
    if grid.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"bilinear_sample: grid {grid.shape}, points {points.shape}")
    _, height, width = grid.shape
    g = grid.data

    px = points.data[:, 0] * width - 0.5
    py = points.data[:, 1] * height - 0.5
    ux = np.clip(px, 0.0, width - 1)
    uy = np.clip(py, 0.0, height - 1)
    x_free = (px > 0.0) & (px < width - 1)
    y_free = (py > 0.0) & (py < height - 1)

    x0 = np.minimum(np.floor(ux).astype(np.intp), max(width - 2, 0))
    y0 = np.minimum(np.floor(uy).astype(np.intp), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = ux - x0
    fy = uy - y0

    v00 = g[:, y0, x0]
    v01 = g[:, y0, x1]
    v10 = g[:, y1, x0]
    v11 = g[:, y1, x1]
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).T

    def _backward(grad_out: Array) -> tuple[Array, Array]:
        gt = grad_out.T
        grad_grid = np.zeros_like(g)
        np.add.at(grad_grid, (slice(None), y0, x0), gt * w00)
        np.add.at(grad_grid, (slice(None), y0, x1), gt * w01)
        np.add.at(grad_grid, (slice(None), y1, x0), gt * w10)
        np.add.at(grad_grid, (slice(None), y1, x1), gt * w11)

        d_fx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
        d_fy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
        grad_x = (gt * d_fx).sum(axis=0) * width * x_free
        grad_y = (gt * d_fy).sum(axis=0) * height * y_free
        return grad_grid, np.stack([grad_x, grad_y], axis=-1)

    return make_result(np.ascontiguousarray(out), (grid, points), "bilinear_sample", _backward)
