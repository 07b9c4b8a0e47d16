"""Input validation helpers shared by the estimators and the synthesis ops."""

import numbers

import numpy as np

from .exceptions import InvalidParameterError


def check_image(img, name="img"):
    """Return ``img`` as an ``(H, W, 3)`` float64 array with values in [0, 255]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidParameterError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParameterError(f"{name} must be non-empty, got {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255:
        raise InvalidParameterError(f"{name} values must lie in [0, 255]")
    return arr


def check_images(X, name="X", image_shape=None):
    """Validate a stack of images ``(N, H, W, 3)``; a single image is promoted."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidParameterError(f"{name} must have shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidParameterError(f"{name} is empty")
    if image_shape is not None and tuple(arr.shape[1:3]) != tuple(image_shape):
        raise InvalidParameterError(
            f"{name} has image size {arr.shape[1:3]}, expected {tuple(image_shape)}"
        )
    if arr.dtype != np.uint8 and (arr.min() < 0 or arr.max() > 255):
        raise InvalidParameterError(f"{name} values must lie in [0, 255]")
    return arr


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise InvalidParameterError(f"{name} must be a positive real, got {value!r}")
    return float(value)


def check_labels(y, n, name="y"):
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise InvalidParameterError(f"{name} must be a 1-d array of length {n}")
    return arr


def to_uint8(arr):
    """Round and clip a real array to the 8-bit pixel range."""
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)
