"""Dense float64 feature maps.

Arrays are validated and frozen on construction: every public operation in the
library treats them as immutable values, which is what makes repeated calls
bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mova.errors import NumericError, ShapeError


def as_finite_array(values, name: str = "tensor") -> np.ndarray:
    """Convert to a float64 array and reject NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class FeatureMap:
    """A channels x height x width feature map backed by a read-only array."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_finite_array(self.data, "feature map")
        if arr.ndim != 3:
            raise ShapeError(f"feature map must be rank 3, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"feature map extents must be >= 1, got {arr.shape}")
        object.__setattr__(self, "data", freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def tokens(self) -> np.ndarray:
        """Flatten spatial positions to a (H*W, C) token matrix."""
        c, h, w = self.shape
        return self.data.reshape(c, h * w).T.copy()

    @staticmethod
    def from_tokens(tokens: np.ndarray, height: int, width: int) -> "FeatureMap":
        """Inverse of tokens(): rebuild a (C, height, width) map."""
        t = np.asarray(tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != height * width:
            raise ShapeError(
                f"token matrix {t.shape} does not match {height}x{width} positions"
            )
        return FeatureMap(t.T.reshape(t.shape[1], height, width))
