"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .errors import ArgumentError


def check_matrix(a, name="matrix", allow_empty=True):
    """Return ``a`` as a C-contiguous finite float64 2-D array.

    Zero-width matrices are allowed by default because preserved-key and
    compressed-key blocks legitimately have no columns in the degenerate
    full-compression and keep-all cases.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ArgumentError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_vector(a, size, name="vector"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != (size,):
        raise ArgumentError(f"{name} must have shape ({size},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains NaN or Inf")
    return arr


def check_shape(a, shape, name):
    if tuple(a.shape) != tuple(shape):
        raise ArgumentError(f"{name} must have shape {tuple(shape)}, got {tuple(a.shape)}")


def check_count(value, name, minimum=0, maximum=None):
    """Validate an integer count and return it as ``int``."""
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ArgumentError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ArgumentError(f"{name} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise ArgumentError(f"{name} must be <= {maximum}, got {value}")
    return value


def check_tokens(tokens, vocab_size, name="tokens"):
    """Return a 1-D int64 token array with every id inside the vocabulary."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ArgumentError(f"{name} must be a 1-D sequence")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ArgumentError(f"{name} must contain integer ids")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ArgumentError(f"{name} has ids outside [0, {vocab_size})")
    return arr


def as_batch(x):
    """Promote an (S, d) array to (1, S, d); return it plus a squeeze flag."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ArgumentError(f"expected (S, d) or (B, S, d) input, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("input contains NaN or infinity")
    return x, squeeze
