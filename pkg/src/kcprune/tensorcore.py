"""Dense float32 tensor helpers.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float32.
Reductions accumulate in float64 in a fixed order and return float64 results;
callers round to float32 once when they store a value.
"""

import numpy as np

from . import _accel
from .errors import UsageError

DTYPE = np.float32


def as_tensor(data, shape=None):
    """Return ``data`` as a contiguous float32 array, optionally reshaped."""
    t = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise UsageError(f"shape entries must be positive, got {shape}")
        if int(np.prod(shape)) != t.size:
            raise UsageError(f"cannot view {t.size} elements as {shape}")
        t = t.reshape(shape)
    return t


def zeros(*shape):
    return np.zeros(shape, dtype=DTYPE)


def frobenius_norm(t):
    """sqrt of the sum of squared elements, accumulated in float64."""
    t = np.asarray(t)
    if t.size == 0:
        raise UsageError("frobenius_norm of an empty tensor")
    return float(np.sqrt(_accel.sum_squares(np.ascontiguousarray(t).reshape(-1))))


def mean_over_leading_axes(t, kept_trailing_axes):
    """Arithmetic mean over every axis except the last ``kept_trailing_axes``.

    Summation runs over the collapsed leading index in ascending order. The
    result is float64 with the trailing shape of ``t``.
    """
    t = np.asarray(t)
    kept = int(kept_trailing_axes)
    if kept < 0 or kept >= t.ndim:
        raise UsageError(f"kept_trailing_axes must lie in [0, {t.ndim}), got {kept}")
    if t.size == 0:
        raise UsageError("mean over an empty tensor")
    trailing = t.shape[t.ndim - kept:]
    rows = np.ascontiguousarray(t).reshape(-1, int(np.prod(trailing, dtype=np.int64)))
    return _accel.mean_rows(rows).reshape(trailing)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise UsageError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_same(a, b, "add")
    return (a + b).astype(a.dtype, copy=False)


def subtract(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_same(a, b, "subtract")
    return (a - b).astype(a.dtype, copy=False)


def hadamard(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_same(a, b, "hadamard")
    return (a * b).astype(a.dtype, copy=False)


def scale(a, c):
    a = np.asarray(a)
    return (a * a.dtype.type(c)).astype(a.dtype, copy=False)


def matmul(a, b):
    """2-D matrix product with inner-dimension agreement enforced."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise UsageError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def all_finite(*arrays):
    return all(bool(np.isfinite(x).all()) for x in arrays)
