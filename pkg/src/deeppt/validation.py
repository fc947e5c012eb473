"""Input validation helpers shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array

from .datasets import TrackingSamples
from .nn import ShapeError


def check_patches(patches, size):
    """Return a (N, size, size) array; a single 2-D patch gets a batch axis."""
    arr = np.asarray(patches)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (size, size):
        raise ShapeError(f"expected {size}x{size} patches, got shape {np.shape(patches)}")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError("patches contain non-finite values")
    return arr


def check_tracking_samples(X):
    if not isinstance(X, TrackingSamples):
        raise TypeError(f"expected TrackingSamples, got {type(X).__name__}")
    return X


def check_features(X, n_features=None):
    """2-D float array of feature rows, flattening per-sample maps."""
    arr = np.asarray(X)
    if arr.ndim > 2:
        arr = arr.reshape(len(arr), -1)
    arr = check_array(arr, dtype=(np.float32, np.float64), ensure_2d=True)
    if n_features is not None and arr.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features, got {arr.shape[1]}")
    return arr
