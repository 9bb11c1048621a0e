"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, ShapeError
from .net import STRIDE


def check_images(X, dtype=np.float32) -> np.ndarray:
    """Return a ``[N, 3, H, W]`` float array with finite values in [0, 1].

    A single ``[3, H, W]`` image is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected images shaped [N, 3, H, W], got {np.shape(X)}")
    if arr.shape[0] == 0:
        raise ShapeError("no images given")
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    check_size(arr.shape[-2:])
    return arr


def check_masks(y, images: np.ndarray) -> np.ndarray:
    """Return ``[N, 1, H, W]`` float32 masks matching ``images``; values must be 0 or 1."""
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[:, None]
    expected = (images.shape[0], 1) + images.shape[2:]
    if arr.shape != expected:
        raise ShapeError(f"masks shaped {np.shape(y)} do not match images {images.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("masks must be binary (0 or 1)")
    return arr.astype(np.float32)


def check_size(size) -> None:
    h, w = (int(v) for v in size)
    if h % STRIDE or w % STRIDE or h < STRIDE or w < STRIDE:
        raise ConfigError(f"image size {(h, w)} must be a positive multiple of {STRIDE}")
