"""Localization metrics: matching, angular error, size error, MAPE, ECDF.

Estimated clusters are matched to true transmitters by the permutation with
the smallest total angular error (exhaustive, K <= 8).  Positions are scored
with the vector mean absolute percentage error 100/N * sum ||y - y_hat||/||y||
over all transmitter instances.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .channel import BracketError, ChannelParams, invert_distance
from .validation import check_unit_rows, check_vector

__all__ = [
    "angular_error_deg",
    "pairwise_angular_errors_deg",
    "match_clusters",
    "size_metrics",
    "ecdf",
    "localize",
    "LocalizationEstimate",
    "localization_mape",
    "mape_vectors",
    "imbalance_analysis",
    "ImbalanceBin",
]

_MAX_EXHAUSTIVE_K = 8


def angular_error_deg(u, v) -> float:
    """Angle in degrees between two unit vectors, in [0, 180]."""
    u = check_vector(u, "u")
    v = check_vector(v, "v")
    for name, w in (("u", u), ("v", v)):
        if abs(np.linalg.norm(w) - 1.0) > 1e-9:
            raise ValueError(f"{name} must be a unit vector within 1e-9")
    return float(np.degrees(np.arccos(np.clip(np.dot(u, v), -1.0, 1.0))))


def pairwise_angular_errors_deg(U, V) -> np.ndarray:
    """(n, m) matrix of angles in degrees between rows of U and rows of V."""
    U = check_unit_rows(U, "U")
    V = check_unit_rows(V, "V")
    return np.degrees(np.arccos(np.clip(U @ V.T, -1.0, 1.0)))


def match_clusters(est_dirs, true_dirs) -> np.ndarray:
    """Permutation pi minimizing sum_i angle(est[i], true[pi[i]]), exhaustively.

    Returns an index array ``pi`` with est row i matched to true row pi[i].
    """
    est = check_unit_rows(est_dirs, "est_dirs")
    true = check_unit_rows(true_dirs, "true_dirs")
    if est.shape != true.shape:
        raise ValueError(f"direction sets differ in shape: {est.shape} vs {true.shape}")
    k = est.shape[0]
    if k > _MAX_EXHAUSTIVE_K:
        raise ValueError(f"exhaustive matching supports K <= {_MAX_EXHAUSTIVE_K}, got {k}")
    cost = pairwise_angular_errors_deg(est, true)
    best_perm, best_total = None, np.inf
    for perm in itertools.permutations(range(k)):
        total = cost[np.arange(k), perm].sum()
        if total < best_total:
            best_total, best_perm = total, perm
    return np.asarray(best_perm, dtype=np.int64)


def size_metrics(pred, truth) -> tuple[float, float]:
    """(MAPE %, RMSE) of predicted against true sizes.

    Zero truth entries are undefined for MAPE; they are skipped with a
    warning but still count toward the RMSE.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be 1-D arrays of equal length")
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    ok = truth > 0
    if not np.all(ok):
        warnings.warn(f"skipped {int((~ok).sum())} zero-truth size(s) in MAPE", RuntimeWarning, stacklevel=2)
    if not np.any(ok):
        raise ValueError("no positive truth entries: MAPE undefined")
    mape = float(100.0 * np.mean(np.abs(pred[ok] - truth[ok]) / truth[ok]))
    return mape, rmse


def ecdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF: sorted unique values x with F(x) = #(values <= x) / N."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("ecdf needs at least one value")
    xs, counts = np.unique(values, return_counts=True)
    return xs, np.cumsum(counts) / values.size


@dataclass
class LocalizationEstimate:
    """A transmitter position estimate and whether the distance was bracketable."""

    position: np.ndarray  # (3,) um
    distance_um: float
    flagged: bool  # True when the hit fraction fell outside the invertible range


def localize(direction, size_est: float, n_emitted: int, params: ChannelParams, d_max_um: float = 30.0) -> LocalizationEstimate:
    """Position estimate d_hat * direction with d_hat inverted from the hit fraction.

    A hit fraction outside [p_hit(d_max), 1] cannot be inverted; the distance
    is clamped to the nearest bracket edge and the estimate flagged so that
    aggregate error metrics can exclude it.
    """
    direction = check_vector(direction, "direction")
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector within 1e-9")
    if n_emitted < 1:
        raise ValueError(f"n_emitted must be >= 1, got {n_emitted}")
    p = float(size_est) / float(n_emitted)
    try:
        d = invert_distance(p, params, d_max_um)
        flagged = False
    except BracketError:
        d = params.rx_radius_um if p > 1.0 else d_max_um
        flagged = True
    return LocalizationEstimate(position=d * direction, distance_um=d, flagged=flagged)


def localization_mape(estimates: list[LocalizationEstimate], true_positions) -> tuple[float, int]:
    """Vector MAPE (%) over unflagged estimates, plus the excluded count.

    ``true_positions`` is (N, 3) aligned with ``estimates``; flagged
    estimates are excluded from the average and reported separately.
    """
    positions = np.asarray([e.position for e in estimates], dtype=np.float64)
    flags = np.asarray([e.flagged for e in estimates], dtype=bool)
    return mape_vectors(positions, true_positions, flags)


def mape_vectors(est_positions, true_positions, flags=None) -> tuple[float, int]:
    """Array form of localization_mape: 100/N * sum ||y - y_hat|| / ||y||."""
    est_positions = np.asarray(est_positions, dtype=np.float64)
    true_positions = np.asarray(true_positions, dtype=np.float64)
    if est_positions.shape != true_positions.shape or est_positions.ndim != 2:
        raise ValueError("estimated and true positions must be (N, 3) arrays of equal shape")
    if flags is None:
        flags = np.zeros(est_positions.shape[0], dtype=bool)
    flags = np.asarray(flags, dtype=bool)
    norm_y = np.linalg.norm(true_positions, axis=1)
    if np.any(norm_y <= 0.0):
        raise ValueError("true position at the origin has undefined percentage error")
    keep = ~flags
    if not np.any(keep):
        raise ValueError("every estimate was flagged: MAPE undefined")
    terms = np.linalg.norm(true_positions[keep] - est_positions[keep], axis=1) / norm_y[keep]
    return float(100.0 * terms.mean()), int(flags.sum())


@dataclass
class ImbalanceBin:
    """Error statistics of one imbalance bin [lo, hi)."""

    lo: float
    hi: float
    count: int
    q1: float
    median: float
    q3: float
    min: float
    max: float


def imbalance_analysis(imbalances, errors, bin_width: float = 0.1) -> list[ImbalanceBin]:
    """Bin per-scenario angular errors by K-means size imbalance.

    Parameters
    ----------
    imbalances : (S,) per-scenario mean pairwise imbalance in [0, 1]
    errors : sequence of S arrays
        Angular errors of the scenario's transmitter instances; all values of
        a scenario fall into its imbalance bin.
    bin_width : float in (0, 1]

    Empty bins are emitted with count 0 and NaN statistics.
    """
    if not 0.0 < bin_width <= 1.0:
        raise ValueError(f"bin_width must be in (0, 1], got {bin_width}")
    imbalances = np.asarray(imbalances, dtype=np.float64)
    if len(errors) != imbalances.shape[0]:
        raise ValueError("imbalances and errors differ in length")
    if np.any((imbalances < 0.0) | (imbalances > 1.0)):
        raise ValueError("imbalances must lie in [0, 1]")

    n_bins = int(np.ceil(1.0 / bin_width - 1e-12))
    edges = np.minimum(np.arange(n_bins + 1) * bin_width, 1.0)
    # right-closed top bin so imbalance == 1.0 lands in the last interval
    idx = np.clip(np.searchsorted(edges, imbalances, side="right") - 1, 0, n_bins - 1)

    bins = []
    for b in range(n_bins):
        vals = [np.asarray(errors[s], dtype=np.float64).ravel() for s in np.flatnonzero(idx == b)]
        pooled = np.concatenate(vals) if vals else np.empty(0)
        if pooled.size:
            q1, med, q3 = np.percentile(pooled, [25.0, 50.0, 75.0])
            stat = (float(q1), float(med), float(q3), float(pooled.min()), float(pooled.max()))
        else:
            stat = (np.nan,) * 5
        bins.append(ImbalanceBin(float(edges[b]), float(edges[b + 1]), int(pooled.size), *stat))
    return bins
