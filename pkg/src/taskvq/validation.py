"""Input validation helpers and the error taxonomy shared across the package."""

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation's contract."""


class NumericError(FloatingPointError):
    """A computation produced NaN/Inf, or was refused because inputs had them."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


def check_matrix(x, name="X", n_cols=None, dtype=np.float32):
    """Coerce to a 2-D C-contiguous array, optionally pinning the column count."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ShapeError(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    return arr


def check_vector(x, name="x", length=None, dtype=np.float32):
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ShapeError(f"{name} must have length {length}, got {arr.shape[0]}")
    return arr


def check_finite(arr, what="array"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def check_weights(w, name="weights", tol=1e-6):
    """Validate a probability vector: nonnegative, sums to 1 within tol."""
    w = check_vector(w, name, dtype=np.float64)
    if np.any(w < -1e-12):
        raise ContractError(f"{name} must be nonnegative")
    s = float(w.sum())
    if abs(s - 1.0) > tol:
        raise ContractError(f"{name} must sum to 1 (got {s:.8f})")
    return w
