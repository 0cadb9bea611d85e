"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .triplets import TripletSet


def check_triplets(X, n_users: int | None = None, n_items: int | None = None) -> np.ndarray:
    """Return ``X`` as a contiguous ``(n, 3)`` int64 array, validating index ranges."""
    t = X.array if isinstance(X, TripletSet) else np.asarray(X)
    if t.ndim != 2 or t.shape[1] != 3:
        raise ValueError(f"triplets must have shape (n, 3), got {t.shape}")
    if not len(t):
        raise ValueError("empty triplet set")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.array_equal(t, np.round(t)):
            raise ValueError("triplet indices must be integers")
    t = np.ascontiguousarray(t, dtype=np.int64)
    if t.min() < 0:
        raise ValueError("negative index in triplets")
    if n_users is not None and t[:, 0].max() >= n_users:
        raise ValueError("user index out of range")
    if n_items is not None and t[:, 1:].max() >= n_items:
        raise ValueError("item index out of range")
    return t


def check_weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"expected {n} weights, got {w.shape[0]}")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    return w


def check_positive(name: str, value, strict: bool = True) -> None:
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
