"""Input validation helpers.

All public entry points funnel their array arguments through these functions
so that error behaviour is uniform: bad input raises
:class:`~iopcalib.exceptions.InvalidInputError` with a message naming the
offending argument. Arrays are returned as float64 (or int64 for labels)
copies only when a cast is needed.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError

PROB_ROW_SUM_TOL = 1e-6


def as_vector(x, name="x"):
    """Validate a 1-D finite float vector and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def as_matrix(X, name="X"):
    """Validate a 2-D finite float matrix and return it as float64."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def as_labels(y, n_classes, n_samples=None, name="y"):
    """Validate integer labels in ``[0, n_classes)`` and return them as int64."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(arr == np.floor(arr)):
            arr = arr.astype(np.int64)
        else:
            raise InvalidInputError(f"{name} must hold integers")
    arr = arr.astype(np.int64, copy=False)
    if n_samples is not None and arr.shape[0] != n_samples:
        raise InvalidInputError(
            f"{name} has {arr.shape[0]} entries, expected {n_samples}"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise InvalidInputError(
            f"{name} must lie in [0, {n_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr


def check_logits_labels(X, y, n_classes=None):
    """Validate a (logits, labels) pair and return float64/int64 arrays."""
    X = as_matrix(X, name="logits")
    if n_classes is not None and X.shape[1] != n_classes:
        raise InvalidInputError(
            f"logits have {X.shape[1]} columns, expected {n_classes}"
        )
    y = as_labels(y, X.shape[1], n_samples=X.shape[0], name="labels")
    return X, y


def check_prob_matrix(P, name="probs"):
    """Validate an N x k probability matrix whose rows sum to 1.

    Rows must sum to one within ``PROB_ROW_SUM_TOL`` and entries must lie in
    [0, 1] (up to the same tolerance).
    """
    P = as_matrix(P, name=name)
    if np.any(P < -PROB_ROW_SUM_TOL) or np.any(P > 1 + PROB_ROW_SUM_TOL):
        raise InvalidInputError(f"{name} entries must lie in [0, 1]")
    row_sums = P.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > PROB_ROW_SUM_TOL
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise InvalidInputError(
            f"{name} row {i} sums to {row_sums[i]!r}, expected 1 within "
            f"{PROB_ROW_SUM_TOL}"
        )
    return P
