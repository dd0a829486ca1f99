"""Minimum covariance determinant estimation (FAST-MCD with concentration steps).

From random 4-point elemental starts, each C-step recomputes mean and
covariance on the h points with the smallest Mahalanobis distance; the
covariance determinant never increases, so iteration converges.  The
minimum-determinant solution is kept, its covariance is rescaled by the
chi-square consistency factor, and points within the 97.5% chi-square
radius form the inlier set.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import chi2
from sklearn.base import BaseEstimator

from .seeding import as_generator
from .validation import check_points

__all__ = ["FastMCD", "DegenerateSubsetError", "mahalanobis_sq"]

_DIM = 3
_ELEMENTAL_SIZE = _DIM + 1
# chi-square quantiles for 3 degrees of freedom (consistency and inlier cut)
_CHI2_MEDIAN = float(chi2.ppf(0.5, _DIM))
_CHI2_INLIER = float(chi2.ppf(0.975, _DIM))


class DegenerateSubsetError(RuntimeError):
    """Every elemental start produced a singular covariance."""


def mahalanobis_sq(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distances of rows of X; raises LinAlgError if cov is singular."""
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (X - mean).T)
    return np.sum(sol**2, axis=0)


class FastMCD(BaseEstimator):
    """Robust location and scatter by the minimum covariance determinant.

    Parameters
    ----------
    support_fraction : float in [0.5, 1)
        Fraction of points defining the h-subset, h = ceil(fraction * n).
    n_starts : int, default 50
        Random elemental starts.
    max_c_steps : int, default 100
    det_tol : float, default 1e-12
        Relative determinant decrease below which C-steps stop.
    random_state : int, SeedSequence, or Generator

    Attributes
    ----------
    location_ : (3,) robust mean (mean of the inlier set)
    covariance_ : (3, 3) consistency-rescaled MCD covariance
    support_ : (n,) bool inlier mask (squared robust distance <= chi2_3(0.975))
    raw_location_, raw_covariance_ : the unrescaled h-subset solution
    raw_determinant_ : determinant of raw_covariance_
    """

    def __init__(self, support_fraction=0.75, n_starts=50, max_c_steps=100, det_tol=1e-12, random_state=0):
        self.support_fraction = support_fraction
        self.n_starts = n_starts
        self.max_c_steps = max_c_steps
        self.det_tol = det_tol
        self.random_state = random_state

    def min_points(self) -> int:
        return 10

    def fit(self, X, y=None):
        X = check_points(X, min_rows=self.min_points())
        n = X.shape[0]
        if not 0.5 <= self.support_fraction < 1.0:
            raise ValueError(f"support_fraction must be in [0.5, 1), got {self.support_fraction}")
        h = int(np.ceil(self.support_fraction * n))
        if h < _ELEMENTAL_SIZE:
            raise ValueError(f"h = {h} is below the minimum of {_ELEMENTAL_SIZE}")
        rng = as_generator(self.random_state)

        best_det = np.inf
        best = None
        for _ in range(self.n_starts):
            sol = self._concentrate(X, h, rng)
            if sol is None:
                continue
            mean, cov, det = sol
            if det < best_det:
                best_det, best = det, (mean, cov)
        if best is None:
            raise DegenerateSubsetError(f"all {self.n_starts} elemental starts were degenerate")

        mean, cov = best
        d2 = mahalanobis_sq(X, mean, cov)
        factor = float(np.median(d2)) / _CHI2_MEDIAN
        if factor <= 0.0:
            raise DegenerateSubsetError("median robust distance is zero; data are degenerate")
        cov_scaled = cov * factor
        inliers = (d2 / factor) <= _CHI2_INLIER

        self.raw_location_ = mean
        self.raw_covariance_ = cov
        self.raw_determinant_ = best_det
        self.covariance_ = cov_scaled
        self.support_ = inliers
        self.location_ = X[inliers].mean(axis=0)
        self.h_ = h
        return self

    def _concentrate(self, X, h, rng):
        """Run C-steps from one elemental start; None if it degenerates."""
        idx = rng.choice(X.shape[0], size=_ELEMENTAL_SIZE, replace=False)
        mean, cov, det = _subset_moments(X[idx])
        if det is None:
            return None
        prev_det = None  # compare h-subset determinants only, not the elemental one
        for _ in range(self.max_c_steps):
            try:
                d2 = mahalanobis_sq(X, mean, cov)
            except np.linalg.LinAlgError:
                return None
            keep = np.argpartition(d2, h - 1)[:h]
            mean, cov, det = _subset_moments(X[keep])
            if det is None:
                return None
            if prev_det is not None and prev_det - det <= self.det_tol * prev_det:
                break
            prev_det = det
        return mean, cov, det


def _subset_moments(pts):
    """Sample mean/covariance of a subset, with det; det None when singular."""
    mean = pts.mean(axis=0)
    diff = pts - mean
    cov = diff.T @ diff / (pts.shape[0] - 1)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or not np.isfinite(logdet):
        return mean, cov, None
    return mean, cov, float(np.exp(logdet))
