"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatch, ShapeMismatch, TooSmall

MIN_SIDE = 32


def check_image(image, *, min_side: int | None = None, dtype=np.float32, name: str = "image") -> np.ndarray:
    """Validate an H x W x 3 raster in [0, 1] and return it as a float array.

    Raises ``ShapeMismatch`` for a wrong layout, ``ValueError`` for
    non-finite or out-of-range values and ``TooSmall`` when either side
    is below ``min_side``.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"{name} must have shape (H, W, 3), got {arr.shape}")
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    if min_side is not None and min(arr.shape[:2]) < min_side:
        raise TooSmall(f"{name} is {arr.shape[0]}x{arr.shape[1]}; both sides must be >= {min_side}")
    return arr


def check_mask(mask, image=None, *, name: str = "mask"):
    """Check that ``mask`` is a SegmentationMask matching ``image`` spatially."""
    from .image_io import SegmentationMask

    if not isinstance(mask, SegmentationMask):
        raise TypeError(f"{name} must be a SegmentationMask, got {type(mask).__name__}")
    if image is not None:
        h, w = np.asarray(image).shape[:2]
        if mask.shape != (h, w):
            raise DimensionMismatch(f"{name} is {mask.shape}, image is {(h, w)}")
    return mask
