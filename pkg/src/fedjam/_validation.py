"""Input checks shared by the estimators and the CLI."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError, InputError


def check_images(X, image_shape) -> np.ndarray:
    """Coerce images to a float32 ``[n, 1, H, W]`` batch scaled to [0, 1].

    Accepts ``(n, H*W)``, ``(n, H, W)`` or ``(n, 1, H, W)``. Integer input is
    read as 8-bit pixels and divided by 255; float input must already lie in
    [0, 1].
    """
    h, w = image_shape
    X = check_array(X, dtype=None, allow_nd=True, ensure_2d=False)
    if X.ndim == 2 and X.shape[1] == h * w:
        X = X.reshape(-1, h, w)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (1, h, w):
        raise DimensionError(f"expected images of {h}x{w} pixels, got array of shape {X.shape}")
    if np.issubdtype(X.dtype, np.integer):
        return (X.astype(np.float32) / np.float32(255.0)).astype(np.float32)
    X = X.astype(np.float32)
    if X.size and (X.min() < 0 or X.max() > 1):
        raise InputError("float images must be scaled to [0, 1]")
    return X


def check_labels(y, n_classes: int, n_samples=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise InputError(f"labels must be one-dimensional, got shape {y.shape}")
    if n_samples is not None and len(y) != n_samples:
        raise InputError(f"{n_samples} images but {len(y)} labels")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InputError("labels must be integer class codes")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    return y


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise InputError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
