"""Input validation helpers shared by the transforms, the model and the estimator."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when array geometry is incompatible with an operation."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_raster(x, *, name: str = "raster") -> np.ndarray:
    """Return ``x`` as an array whose last two axes are power-of-two sized and finite."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"{name} must have at least 2 dimensions, got shape {x.shape}")
    h, w = x.shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ShapeError(f"{name} shape {h}x{w} is not a power of two in both dimensions")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_image_batch(x, *, name: str = "X") -> np.ndarray:
    """Coerce a single raster or a stack of rasters to a (n, h, w) complex array."""
    x = check_raster(x, name=name)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (h, w) or (n, h, w), got shape {x.shape}")
    return x.astype(np.complex128, copy=False)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} have mismatched shapes {a.shape} and {b.shape}")
