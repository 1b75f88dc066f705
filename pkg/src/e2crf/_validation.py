"""Exceptions and input validation helpers shared across the package."""

import numpy as np


class DimensionError(ValueError):
    """Array shape does not match what the operation expects."""


class SymmetryError(ValueError):
    """A half-spectrum violates conjugate symmetry (non-real DC/Nyquist)."""


class NumericalError(FloatingPointError):
    """Non-finite values appeared during a computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CacheError(RuntimeError):
    """The KV/CRF cache cannot serve the requested forward pass."""


def check_series(x, name="x"):
    """Return ``x`` as a float64 array of shape (..., N, M).

    A 1-D input is read as a univariate series (M = 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim < 2:
        raise DimensionError(f"{name} must have shape (..., N, M), got {x.shape}")
    n, m = x.shape[-2:]
    if n < 2 or m < 1:
        raise DimensionError(f"{name} needs N >= 2 and M >= 1, got N={n}, M={m}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_batch(X, n=None, m=None, name="X"):
    """Validate a batch of series with shape (n_samples, N, M).

    2-D input is treated as (n_samples, N) with a single feature.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise DimensionError(f"{name} must have shape (n_samples, N, M), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    X = check_series(X, name)
    if n is not None and X.shape[1] != n:
        raise DimensionError(f"{name} has N={X.shape[1]}, expected {n}")
    if m is not None and X.shape[2] != m:
        raise DimensionError(f"{name} has M={X.shape[2]}, expected {m}")
    return X


def check_unit_time(t, name="t"):
    """Scalar or array of times in [0, 1]; scalars come back as ``float``."""
    if np.ndim(t) == 0:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {t}")
        return t
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t >= 0.0) & (t <= 1.0)):
        raise ValueError(f"{name} must lie in [0, 1]")
    return t


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
