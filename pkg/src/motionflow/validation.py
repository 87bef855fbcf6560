"""Input validation helpers shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, NotFittedError, ValidationError


def check_array(x, *, ndim=None, shape=None, name="array", dtype=np.float64, finite=True):
    """Convert ``x`` to an ndarray and check rank, shape and finiteness.

    ``shape`` may contain ``None`` wildcards, e.g. ``(None, 70)``.
    """
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d input, got shape {arr.shape}")
    if shape is not None:
        if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
            raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_probability(p, name="probability"):
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_unit_interval(t, name="t"):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValidationError(f"{name} must lie in [0, 1]")
    return t


def check_positive_int(n, name, minimum=1):
    if int(n) != n or n < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {n}")
    return int(n)


def check_is_fitted(estimator, attributes):
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first (missing {missing})"
        )
