"""Sorting permutations, rank predicates, and order-preserving assembly.

An intra order-preserving map sorts its input, transforms the sorted values
through a reverse cumulative sum of non-negative increments, and scatters the
result back to the original positions. This module owns the sorting and
assembly steps; the increment vectors come from the calibrators.

Sorting is descending with ties broken by ascending original index, so every
permutation here is a deterministic function of its input. Permutations are
stored as index arrays, never as n x n matrices. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolationError, InvalidInputError
from .validation import as_vector

__all__ = [
    "SortResult",
    "sort_descending",
    "argsort_descending",
    "reverse_cumsum",
    "assemble_intra_op",
    "same_ranking",
    "rank_signature",
]


@dataclass(frozen=True)
class SortResult:
    """Descending sort of one vector.

    Attributes
    ----------
    perm : ndarray of int
        ``perm[i]`` is the original index of the i-th largest element.
        Within a run of equal values the entries increase, which is what
        makes the permutation unique.
    sorted : ndarray of float
        The input values in non-increasing order, ``x[perm]``.
    tie_groups : tuple of (start, stop)
        Half-open index ranges within ``sorted`` holding equal values.
        Only runs of length two or more are recorded.
    """

    perm: np.ndarray
    sorted: np.ndarray
    tie_groups: tuple


def sort_descending(x):
    """Sort a vector in non-increasing order with a deterministic tie break.

    Returns a :class:`SortResult`. Ties are broken by ascending original
    index: for ``x = [0, 0]`` the permutation is ``[0, 1]``, never ``[1, 0]``.
    """
    x = as_vector(x, name="x")
    # Stable argsort of -x keeps the original relative order of equal
    # entries, which is exactly the ascending-index tie break.
    perm = np.argsort(-x, kind="stable")
    srt = x[perm]
    tie_groups = []
    eq = srt[:-1] == srt[1:]
    i = 0
    n = x.shape[0]
    while i < n - 1:
        if eq[i]:
            j = i
            while j < n - 1 and eq[j]:
                j += 1
            tie_groups.append((i, j + 1))
            i = j
        else:
            i += 1
    return SortResult(perm=perm, sorted=srt, tie_groups=tuple(tie_groups))


def argsort_descending(X):
    """Row-wise descending stable argsort for an N x n matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError(f"X must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("X contains non-finite values")
    return np.argsort(-X, axis=1, kind="stable")


def reverse_cumsum(w, axis=-1):
    """Suffix sums: ``out[i] = w[i] + w[i+1] + ... + w[n-1]``.

    Accumulation runs right to left, so ``out[-1] == w[-1]`` exactly and
    ``out[i] - out[i+1] == w[i]`` up to one rounding step. Accepts any array;
    the sum runs along ``axis``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise InvalidInputError("w must be non-empty")
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("w contains non-finite values")
    rev = np.flip(w, axis=axis)
    return np.flip(np.cumsum(rev, axis=axis), axis=axis)


def assemble_intra_op(x, w, validate=False):
    """Assemble an intra order-preserving output from increments ``w``.

    Computes ``out[perm[i]] = w[i] + ... + w[n-1]`` where ``perm`` is the
    descending sort permutation of ``x``. When ``w[:-1]`` is non-negative,
    zero exactly at ties of the sorted input and positive on strict descents,
    the output ranks coordinates exactly like ``x`` (the last increment is
    unconstrained; it only shifts the minimum coordinate's value).

    Parameters
    ----------
    x : array-like of shape (n,)
        Input vector to be ranked.
    w : array-like of shape (n,)
        Increment vector in sorted coordinates.
    validate : bool
        When true, check the sign/tie preconditions on ``w`` and raise
        :class:`ContractViolationError` on failure. Off by default because
        the calibrators construct ``w`` so the conditions hold.
    """
    x = as_vector(x, name="x")
    w = as_vector(w, name="w")
    if w.shape[0] != x.shape[0]:
        raise InvalidInputError(
            f"w has length {w.shape[0]}, expected {x.shape[0]}"
        )
    sr = sort_descending(x)
    if validate:
        n = x.shape[0]
        head = w[: n - 1]
        if np.any(head < 0):
            i = int(np.flatnonzero(head < 0)[0])
            raise ContractViolationError(
                f"w[{i}] = {head[i]!r} is negative; increments before the "
                "last must be non-negative"
            )
        ties = sr.sorted[:-1] == sr.sorted[1:]
        bad = ties & (head != 0)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ContractViolationError(
                f"w[{i}] = {head[i]!r} must be exactly zero because sorted "
                f"positions {i} and {i + 1} hold equal values"
            )
    v = reverse_cumsum(w)
    out = np.empty_like(v)
    out[sr.perm] = v
    return out


def same_ranking(u, v):
    """True when ``u`` and ``v`` order their coordinates identically.

    Every pair (i, j) must satisfy ``sign(u[i] - u[j]) == sign(v[i] - v[j])``,
    so ties must match as well. For 2-D inputs the predicate is evaluated
    row-wise and a boolean array is returned.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InvalidInputError(f"shape mismatch: {u.shape} vs {v.shape}")
    if u.ndim not in (1, 2):
        raise InvalidInputError(f"inputs must be 1-D or 2-D, got {u.ndim}-D")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidInputError("inputs contain non-finite values")
    single = u.ndim == 1
    if single:
        u = u[None, :]
        v = v[None, :]
    su = np.sign(u[:, :, None] - u[:, None, :])
    sv = np.sign(v[:, :, None] - v[:, None, :])
    out = np.all(su == sv, axis=(1, 2))
    return bool(out[0]) if single else out


def rank_signature(x):
    """Pairwise comparison matrix ``sig[i, j] = sign(x[i] - x[j])`` as int8.

    The signature is antisymmetric with a zero diagonal and fully determines
    the ranking of ``x``: two vectors rank identically iff their signatures
    are equal.
    """
    x = as_vector(x, name="x")
    return np.sign(x[:, None] - x[None, :]).astype(np.int8)
