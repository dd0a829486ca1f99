"""Clustering of received-molecule positions and centroid-correction methods.

The baseline partition comes from K-means (Lloyd's algorithm, k-means++
seeding).  Three corrections then move cluster centers without touching
memberships:

* ``density``: density-weighted centroid, weights inverse to mean kNN distance
* ``mincovdet``: robust mean of the minimum-covariance-determinant inliers
* ``density-mincovdet``: density-weighted centroid over the MCD inlier set

A full-covariance Gaussian mixture fitted by EM is kept as a second baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin

from .robust import FastMCD
from .seeding import as_generator
from .validation import check_points, normalize_rows

__all__ = [
    "Cluster",
    "ClusterSet",
    "KMeansCluster",
    "GaussianMixtureCluster",
    "CovarianceDegeneracyError",
    "knn_density_weights",
    "density_weighted_centroid",
    "correct_centers",
    "mean_pairwise_imbalance",
    "CORRECTION_METHODS",
    "CLUSTER_METHODS",
]

CORRECTION_METHODS = ("density", "mincovdet", "density-mincovdet")
CLUSTER_METHODS = ("kmeans", "gmm") + CORRECTION_METHODS

_DENSITY_EPS_UM = 1e-9


class CovarianceDegeneracyError(RuntimeError):
    """A mixture component collapsed beyond what the ridge can repair."""


@dataclass
class Cluster:
    """One estimated cluster: center, unit direction, and its members."""

    centroid: np.ndarray  # (3,) um
    direction: np.ndarray  # (3,) unit vector
    size: int
    member_indices: np.ndarray  # indices into the clustered point set
    fallback: bool = False  # True when a correction kept the K-means center

    def __post_init__(self):
        if self.size != len(self.member_indices) or self.size < 1:
            raise ValueError("cluster size must equal its member count and be >= 1")
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"direction must be unit length within 1e-12, |u| = {n!r}")


@dataclass
class ClusterSet:
    """Result of one clustering or correction method over one point set."""

    method: str
    clusters: list[Cluster]
    n_points: int = field(default=0)

    def __post_init__(self):
        if self.method not in CLUSTER_METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {CLUSTER_METHODS}")
        if self.n_points == 0:
            self.n_points = int(sum(c.size for c in self.clusters))

    @property
    def k(self) -> int:
        return len(self.clusters)

    def directions(self) -> np.ndarray:
        return np.array([c.direction for c in self.clusters])

    def centroids(self) -> np.ndarray:
        return np.array([c.centroid for c in self.clusters])

    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters], dtype=np.int64)

    def check_partition(self) -> None:
        """Raise unless the member sets exactly partition range(n_points)."""
        seen = np.concatenate([c.member_indices for c in self.clusters])
        if len(seen) != self.n_points or not np.array_equal(np.sort(seen), np.arange(self.n_points)):
            raise AssertionError("cluster members do not partition the point set")


def _to_cluster_set(method: str, X: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> ClusterSet:
    clusters = []
    for j in range(centers.shape[0]):
        members = np.flatnonzero(labels == j)
        direction, ok = normalize_rows(centers[j][None, :])
        if not ok[0]:
            # center at the origin has no direction; fall back to member mean direction
            direction, _ = normalize_rows(X[members].mean(axis=0)[None, :])
        clusters.append(
            Cluster(centroid=centers[j].copy(), direction=direction[0], size=len(members), member_indices=members)
        )
    return ClusterSet(method=method, clusters=clusters, n_points=X.shape[0])


class KMeansCluster(BaseEstimator, ClusterMixin):
    """K-means with k-means++ seeding and restart selection by inertia.

    Parameters
    ----------
    n_clusters : int
    n_restarts : int, default 10
        Independent seeded runs; the lowest within-cluster sum of squares wins.
    max_iter : int, default 300
    tol : float, default 1e-7
        Convergence threshold on the largest centroid movement, in um.
    random_state : int, SeedSequence, or Generator

    Attributes
    ----------
    cluster_centers_ : (k, 3) ndarray
    labels_ : (n,) ndarray
    inertia_ : float
    inertia_history_ : list of per-iteration inertia of the winning restart
    """

    def __init__(self, n_clusters=2, n_restarts=10, max_iter=300, tol=1e-7, random_state=0):
        self.n_clusters = n_clusters
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X, min_rows=self.n_clusters)
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        rng = as_generator(self.random_state)

        best = None
        for _ in range(max(1, self.n_restarts)):
            centers, labels, inertia, history = self._lloyd(X, rng)
            if best is None or inertia < best[2]:
                best = (centers, labels, inertia, history)
        self.cluster_centers_, self.labels_, self.inertia_, self.inertia_history_ = best
        return self

    def to_cluster_set(self, X) -> ClusterSet:
        X = check_points(X)
        return _to_cluster_set("kmeans", X, self.cluster_centers_, self.labels_)

    # -- internals ---------------------------------------------------------

    def _plusplus_init(self, X, rng) -> np.ndarray:
        n = X.shape[0]
        centers = np.empty((self.n_clusters, 3))
        centers[0] = X[rng.integers(n)]
        d2 = np.sum((X - centers[0]) ** 2, axis=1)
        for j in range(1, self.n_clusters):
            total = d2.sum()
            if total <= 0.0:  # all points coincide with chosen centers
                centers[j] = X[rng.integers(n)]
                continue
            centers[j] = X[np.searchsorted(np.cumsum(d2), rng.uniform(0.0, total))]
            d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
        return centers

    def _lloyd(self, X, rng):
        centers = self._plusplus_init(X, rng)
        history = []
        labels = None
        for _ in range(self.max_iter):
            d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
            labels = np.argmin(d2, axis=1)
            counts = np.bincount(labels, minlength=self.n_clusters)
            # repair empty clusters: give them the farthest point of the largest cluster
            while np.any(counts == 0):
                empty = int(np.argmin(counts))
                largest = int(np.argmax(counts))
                members = np.flatnonzero(labels == largest)
                far = members[np.argmax(d2[members, largest])]
                labels[far] = empty
                centers[empty] = X[far]
                counts = np.bincount(labels, minlength=self.n_clusters)
            new_centers = np.empty_like(centers)
            for j in range(self.n_clusters):
                new_centers[j] = X[labels == j].mean(axis=0)
            history.append(float(np.sum((X - new_centers[labels]) ** 2)))
            shift = np.max(np.linalg.norm(new_centers - centers, axis=1))
            centers = new_centers
            if shift < self.tol:
                break
        inertia = float(np.sum((X - centers[labels]) ** 2))
        return centers, labels, inertia, history


class GaussianMixtureCluster(BaseEstimator, ClusterMixin):
    """Full-covariance Gaussian mixture fitted by EM, initialized from K-means.

    Hard assignments (maximum responsibility) define labels and sizes.  A
    ridge of ``reg_covar * I`` keeps covariances invertible; a component that
    stays degenerate anyway raises CovarianceDegeneracyError.
    """

    def __init__(self, n_components=2, max_iter=200, tol=1e-8, reg_covar=1e-6, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.reg_covar = reg_covar
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X, min_rows=4 * self.n_components)
        n, k = X.shape[0], self.n_components
        rng = as_generator(self.random_state)

        km = KMeansCluster(n_clusters=k, random_state=rng).fit(X)
        means = km.cluster_centers_.copy()
        covs = np.empty((k, 3, 3))
        weights = np.empty(k)
        for j in range(k):
            members = X[km.labels_ == j]
            weights[j] = len(members) / n
            covs[j] = self._ridged_cov(members, means[j])

        log_lik = -np.inf
        self.log_likelihood_history_ = []
        for _ in range(self.max_iter):
            log_resp, new_log_lik = self._e_step(X, means, covs, weights)
            self.log_likelihood_history_.append(new_log_lik)
            resp = np.exp(log_resp)
            nk = resp.sum(axis=0)
            if np.any(nk < 1e-12):
                raise CovarianceDegeneracyError("a mixture component lost all responsibility")
            weights = nk / n
            means = (resp.T @ X) / nk[:, None]
            for j in range(k):
                diff = X - means[j]
                covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j]
                covs[j][np.diag_indices(3)] += self.reg_covar
            if abs(new_log_lik - log_lik) < self.tol * abs(new_log_lik):
                log_lik = new_log_lik
                break
            log_lik = new_log_lik

        log_resp, _ = self._e_step(X, means, covs, weights)
        self.means_ = means
        self.covariances_ = covs
        self.weights_ = weights
        self.labels_ = np.argmax(log_resp, axis=1)
        self.log_likelihood_ = log_lik
        return self

    def to_cluster_set(self, X) -> ClusterSet:
        X = check_points(X)
        # an empty hard-assignment component would break the partition
        # invariant; give it its nearest point (rare on real hit sets)
        labels = self.labels_.copy()
        for j in range(self.n_components):
            if not np.any(labels == j):
                d2 = np.sum((X - self.means_[j]) ** 2, axis=1)
                order = np.argsort(d2)
                for idx in order:
                    if np.sum(labels == labels[idx]) > 1:
                        labels[idx] = j
                        break
        return _to_cluster_set("gmm", X, self.means_, labels)

    def _ridged_cov(self, members, mean):
        diff = members - mean
        cov = diff.T @ diff / max(1, len(members))
        cov[np.diag_indices(3)] += self.reg_covar
        return cov

    def _e_step(self, X, means, covs, weights):
        n, k = X.shape[0], self.n_components
        log_prob = np.empty((n, k))
        for j in range(k):
            try:
                L = np.linalg.cholesky(covs[j])
            except np.linalg.LinAlgError as exc:
                raise CovarianceDegeneracyError(f"component {j} covariance is not positive definite") from exc
            sol = np.linalg.solve(L, (X - means[j]).T)
            maha = np.sum(sol**2, axis=0)
            log_det = 2.0 * np.sum(np.log(np.diag(L)))
            log_prob[:, j] = -0.5 * (maha + log_det + 3.0 * np.log(2.0 * np.pi)) + np.log(weights[j])
        m = log_prob.max(axis=1)
        lse = m + np.log(np.sum(np.exp(log_prob - m[:, None]), axis=1))
        log_resp = log_prob - lse[:, None]
        return log_resp, float(lse.sum())


def knn_density_weights(points, k_nn: int = 10) -> np.ndarray:
    """Density weights: inverse mean distance to the k nearest neighbours.

    Requires strictly more points than ``k_nn``; callers with smaller
    clusters fall back to uniform weighting (which reproduces the plain
    centroid) and flag the cluster.
    """
    points = check_points(points, "points")
    n = points.shape[0]
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    if n <= k_nn:
        raise ValueError(f"need more than k_nn={k_nn} points, got {n}")
    dist, _ = cKDTree(points).query(points, k=k_nn + 1)
    mean_dist = dist[:, 1:].mean(axis=1)  # column 0 is the point itself
    return 1.0 / (mean_dist + _DENSITY_EPS_UM)


def density_weighted_centroid(points, weights) -> np.ndarray:
    """Weighted mean of points: sum(w_j x_j) / sum(w_j)."""
    points = check_points(points, "points")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (points.shape[0],):
        raise ValueError(f"weights shape {weights.shape} does not match {points.shape[0]} points")
    if np.any(weights < 0.0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("weights sum to zero")
    return weights @ points / total


def correct_centers(
    X,
    base: ClusterSet,
    method: str,
    k_nn: int = 10,
    support_fraction: float = 0.75,
    random_state=0,
) -> ClusterSet:
    """Re-estimate the centers of a K-means partition without reassigning points.

    Per cluster: ``density`` replaces the center with the density-weighted
    centroid of all members; ``mincovdet`` with the robust mean of the MCD
    inliers; ``density-mincovdet`` with the density-weighted centroid computed
    over the MCD inlier set only.  Clusters too small for the chosen method
    keep their K-means center and are flagged ``fallback``.
    """
    if method not in CORRECTION_METHODS:
        raise ValueError(f"unknown correction {method!r}; expected one of {CORRECTION_METHODS}")
    if base.method != "kmeans":
        raise ValueError(f"corrections are defined on K-means partitions, got base method {base.method!r}")
    X = check_points(X)
    rng = as_generator(random_state)

    corrected = []
    for cl in base.clusters:
        pts = X[cl.member_indices]
        centroid, fallback = _corrected_centroid(pts, method, k_nn, support_fraction, rng)
        if fallback:
            centroid = cl.centroid.copy()
        direction, ok = normalize_rows(centroid[None, :])
        if not ok[0]:
            centroid, direction, fallback = cl.centroid.copy(), cl.direction[None, :], True
        corrected.append(
            Cluster(
                centroid=centroid,
                direction=direction[0],
                size=cl.size,
                member_indices=cl.member_indices,
                fallback=fallback,
            )
        )
    return ClusterSet(method=method, clusters=corrected, n_points=base.n_points)


def _corrected_centroid(pts, method, k_nn, support_fraction, rng):
    n = pts.shape[0]
    if method == "density":
        if n <= k_nn:
            return None, True
        return density_weighted_centroid(pts, knn_density_weights(pts, k_nn)), False

    mcd = FastMCD(support_fraction=support_fraction, random_state=rng)
    if n < mcd.min_points():
        return None, True
    mcd.fit(pts)
    if method == "mincovdet":
        return mcd.location_, False
    inliers = pts[mcd.support_]
    if inliers.shape[0] <= k_nn:
        return None, True
    return density_weighted_centroid(inliers, knn_density_weights(inliers, k_nn)), False


def mean_pairwise_imbalance(sizes) -> float:
    """Mean over unordered pairs of |n_i - n_j| / (n_i + n_j), in [0, 1].

    Pairs whose sizes sum to zero are undefined; they are skipped with a
    warning, and an error is raised if no pair is defined.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or sizes.shape[0] < 2:
        raise ValueError("need at least two sizes")
    if np.any(sizes < 0):
        raise ValueError("sizes must be non-negative")
    vals = []
    skipped = 0
    for i in range(len(sizes)):
        for j in range(i + 1, len(sizes)):
            s = sizes[i] + sizes[j]
            if s <= 0.0:
                skipped += 1
                continue
            vals.append(abs(sizes[i] - sizes[j]) / s)
    if not vals:
        raise ValueError("every pair of sizes sums to zero")
    if skipped:
        warnings.warn(f"skipped {skipped} zero-sum size pair(s) in imbalance", RuntimeWarning, stacklevel=2)
    return float(np.mean(vals))
