"""Input-validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import InvalidSpecError


def check_sequences(X, num_categories=None):
    """Validate and coerce a 2-D integer array of category indices."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.size == 0:
        raise InvalidSpecError(f"expected a nonempty (n_samples, seq_len) array, "
                               f"got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        rounded = np.rint(X)
        if not np.allclose(X, rounded):
            raise InvalidSpecError("category indices must be integers")
        X = rounded
    X = X.astype(np.int64)
    if X.min() < 0:
        raise InvalidSpecError("category indices must be nonnegative")
    if num_categories is not None and X.max() >= num_categories:
        raise InvalidSpecError(
            f"index {X.max()} out of range for {num_categories} categories")
    return X


def check_probability(value, name):
    if not isinstance(value, numbers.Real) or not (0.0 <= value <= 1.0):
        raise InvalidSpecError(f"{name} must be a probability in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or value < 1:
        raise InvalidSpecError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
