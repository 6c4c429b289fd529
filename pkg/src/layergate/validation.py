"""Input validation helpers shared by the public surfaces.

These are deliberately small: they normalize dtypes, check shapes and
finiteness, and raise ``ValueError`` with the offending argument named, so
estimator methods can stay readable.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_float_array",
    "check_finite",
    "check_positive_int",
    "check_probability",
    "check_in",
]


def as_float_array(x, name: str, ndim: int | None = None, dtype=np.float64) -> np.ndarray:
    """Coerce ``x`` to a float ndarray, optionally enforcing its rank."""
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name: str, *, closed_top: bool = False) -> float:
    value = float(value)
    top_ok = value <= 1.0 if closed_top else value < 1.0
    if not (0.0 <= value and top_ok):
        bound = "[0, 1]" if closed_top else "[0, 1)"
        raise ValueError(f"{name} must lie in {bound}, got {value}")
    return value


def check_in(value, options, name: str):
    if value not in options:
        raise ValueError(f"{name} must be one of {sorted(options)}, got {value!r}")
    return value
