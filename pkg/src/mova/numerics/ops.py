"""Deterministic dense kernels: matmul, softmax, interpolation, pooling, attention.

All functions are pure. Summation orders are fixed, so identical inputs give
bitwise-identical outputs.
"""

from __future__ import annotations

import numpy as np

from mova.errors import EmptySupportError, ShapeError
from mova.numerics.tensor import FeatureMap, as_finite_array


def matmul(a, b) -> np.ndarray:
    """Matrix product of an m x k and a k x n matrix."""
    a = as_finite_array(a, "matmul lhs")
    b = as_finite_array(b, "matmul rhs")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    return a @ b


def softmax(v, mask=None) -> np.ndarray:
    """Stable softmax of a vector, optionally restricted to a boolean mask.

    Masked-out entries are exactly zero; the remaining entries are positive
    and sum to one. The masked computation runs on the selected subvector, so
    it is bitwise identical to softmaxing that subvector directly.
    """
    v = as_finite_array(v, "softmax input")
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {v.shape}")
    if mask is None:
        support = np.ones(v.shape[0], dtype=bool)
    else:
        support = np.asarray(mask, dtype=bool)
        if support.shape != v.shape:
            raise ShapeError(
                f"mask length {support.shape} does not match vector {v.shape}"
            )
    if not support.any():
        raise EmptySupportError("softmax mask excludes every entry")
    sub = v[support]
    e = np.exp(sub - sub.max())
    out = np.zeros_like(v)
    out[support] = e / e.sum()
    return out


def bilinear_interpolate(f: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resize a feature map with align-corners bilinear sampling.

    Output index p samples source coordinate p*(n_in-1)/(n_out-1) (0 when the
    output extent is 1). Matching sizes return an exact copy.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target extents must be >= 1, got ({out_h}, {out_w})")
    c, h, w = f.shape
    if (out_h, out_w) == (h, w):
        return FeatureMap(f.data)

    def axis(n_out: int, n_in: int):
        if n_out == 1 or n_in == 1:
            coords = np.zeros(n_out)
        else:
            coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(coords).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, coords - lo

    ylo, yhi, fy = axis(out_h, h)
    xlo, xhi, fx = axis(out_w, w)
    # v0 + f*(v1 - v0) keeps constants and grid-aligned samples exact.
    rows_lo = f.data[:, ylo, :]
    rows = rows_lo + fy[None, :, None] * (f.data[:, yhi, :] - rows_lo)
    cols_lo = rows[:, :, xlo]
    out = cols_lo + fx[None, None, :] * (rows[:, :, xhi] - cols_lo)
    return FeatureMap(out)


def global_avg_pool(f: FeatureMap) -> np.ndarray:
    """Mean over all spatial positions, one value per channel."""
    return f.data.mean(axis=(1, 2))


def avg_pool_2x(f: FeatureMap) -> FeatureMap:
    """Halve both spatial extents by averaging disjoint 2x2 blocks."""
    c, h, w = f.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x needs even extents, got {h}x{w}")
    blocks = f.data.reshape(c, h // 2, 2, w // 2, 2)
    return FeatureMap(blocks.mean(axis=(2, 4)))


def adaptive_avg_pool(f: FeatureMap, grid: int) -> FeatureMap:
    """Average-pool to a grid x grid map; regions tile the input as evenly as possible."""
    c, h, w = f.shape
    if grid < 1:
        raise ShapeError(f"grid must be >= 1, got {grid}")
    if grid > h or grid > w:
        raise ShapeError(f"grid {grid} exceeds spatial extents {h}x{w}")

    def bounds(n_in: int):
        starts = (np.arange(grid) * n_in) // grid
        stops = -(-(np.arange(1, grid + 1) * n_in) // grid)
        return starts, stops

    ys, ye = bounds(h)
    xs, xe = bounds(w)
    out = np.empty((c, grid, grid))
    for i in range(grid):
        for j in range(grid):
            out[:, i, j] = f.data[:, ys[i]:ye[i], xs[j]:xe[j]].mean(axis=(1, 2))
    return FeatureMap(out)


def scaled_dot_attention(q, k, v) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with each score row softmaxed independently."""
    q = as_finite_array(q, "attention query")
    k = as_finite_array(k, "attention key")
    v = as_finite_array(v, "attention value")
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-D token matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    scores = (q @ k.T) / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs @ v
