"""Input validation helpers shared across estimators and functions."""

from __future__ import annotations

import numpy as np


def check_points(X, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """Validate and return a float64 array of 3D points with shape (n, 3)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.shape == (3,):
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {X.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_vector(v, name: str = "v") -> np.ndarray:
    """Validate a single finite 3D vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def check_unit_rows(U, name: str = "directions", tol: float = 1e-9) -> np.ndarray:
    """Validate an (n, 3) array whose rows are unit vectors within ``tol``."""
    U = check_points(U, name=name)
    norms = np.linalg.norm(U, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"rows of {name} must be unit length within {tol:g} (worst deviation {worst:.3e})")
    return U


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def normalize_rows(V: np.ndarray, min_norm: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Normalize rows of V to unit length.

    Returns (unit_rows, ok_mask); rows with norm below ``min_norm`` are left
    untouched and flagged False in the mask.
    """
    V = np.asarray(V, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    ok = norms >= min_norm
    out = V.copy()
    out[ok] = V[ok] / norms[ok, None]
    return out, ok
