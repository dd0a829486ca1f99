"""Clustering-guided refinement networks for directions and sizes.

Each K-means solution is summarized as 4K features (per cluster, in a
canonical order: normalized size, then the unit direction components).  Two
residual networks consume these features: the angle network outputs 3K
direction corrections, the size network K size corrections, both added to
the K-means estimates.  Zero-initialized heads make the untrained networks
exact identities on those estimates.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .cluster import ClusterSet
from .nn import Adam, ResidualMLP

__all__ = [
    "build_features",
    "features_to_dirs",
    "features_to_sizes",
    "AngleRefiner",
    "SizeRefiner",
    "DivergenceError",
    "save_weights",
    "load_refiner",
]

WEIGHTS_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training kept producing non-finite losses after all learning-rate cuts."""


def build_features(clusters: ClusterSet, n_emitted: int) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a ClusterSet into the 4K feature vector.

    Clusters are ordered canonically (size descending, ties broken by the
    direction components lexicographically), so any permutation of the input
    produces the identical vector.  Sizes are normalized by the per-Tx
    emission count and clipped to [0, 1].

    Returns
    -------
    features : (4K,) ndarray
    order : (K,) ndarray
        Indices into ``clusters.clusters`` in feature order.
    """
    if n_emitted < 1:
        raise ValueError(f"n_emitted must be >= 1, got {n_emitted}")
    sizes = clusters.sizes().astype(np.float64)
    dirs = clusters.directions()
    keys = np.stack([-sizes, dirs[:, 0], dirs[:, 1], dirs[:, 2]], axis=1)
    order = np.lexsort((keys[:, 3], keys[:, 2], keys[:, 1], keys[:, 0]))
    feat = np.empty((clusters.k, 4))
    feat[:, 0] = np.clip(sizes[order] / n_emitted, 0.0, 1.0)
    feat[:, 1:] = dirs[order]
    return feat.reshape(-1), order


def features_to_dirs(F: np.ndarray) -> np.ndarray:
    """Direction triples stored in a feature batch, shape (n, K, 3)."""
    F = np.asarray(F, dtype=np.float64)
    n, k = F.shape[0], F.shape[1] // 4
    return F.reshape(n, k, 4)[:, :, 1:]


def features_to_sizes(F: np.ndarray) -> np.ndarray:
    """Normalized cluster sizes stored in a feature batch, shape (n, K)."""
    F = np.asarray(F, dtype=np.float64)
    n, k = F.shape[0], F.shape[1] // 4
    return F.reshape(n, k, 4)[:, :, 0]


class _ResidualRefiner(BaseEstimator):
    """Shared training stack of the angle and size networks."""

    _kind = ""

    def __init__(
        self,
        n_tx=2,
        hidden_dim=256,
        n_blocks=6,
        learning_rate=1e-3,
        batch_size=64,
        max_epochs=500,
        patience=20,
        dropout=0.1,
        weight_decay=1e-5,
        max_lr_halvings=3,
        random_state=0,
    ):
        self.n_tx = n_tx
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.weight_decay = weight_decay
        self.max_lr_halvings = max_lr_halvings
        self.random_state = random_state

    # subclasses define the head width and the residual base in output units
    def _out_dim(self) -> int:
        raise NotImplementedError

    def _base(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 4 * self.n_tx:
            raise ValueError(f"features must be (n, {4 * self.n_tx}) for n_tx={self.n_tx}, got {X.shape}")
        return X

    def _make_model(self) -> ResidualMLP:
        return ResidualMLP(4 * self.n_tx, self._out_dim(), self.hidden_dim, self.n_blocks, self.dropout)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train with Adam, seeded shuffling, and early stopping on validation loss.

        ``y`` is matched to the canonical feature order: (n, K, 3) unit
        directions for the angle network, (n, K) normalized sizes for the
        size network.  Without a validation set, the training loss drives
        early stopping.
        """
        X = self._check_X(X)
        y = self._check_y(y, X.shape[0])
        if (X_val is None) != (y_val is None):
            raise ValueError("provide X_val and y_val together")
        if X_val is not None:
            X_val = self._check_X(X_val)
            y_val = self._check_y(y_val, X_val.shape[0])

        model = self._make_model()
        ss = np.random.SeedSequence(self.random_state)
        init_ss, shuffle_ss, dropout_ss = ss.spawn(3)
        params = model.init_params(np.random.Generator(np.random.Philox(init_ss)))
        shuffle_rng = np.random.Generator(np.random.Philox(shuffle_ss))
        dropout_rng = np.random.Generator(np.random.Philox(dropout_ss))
        adam = Adam(params, learning_rate=self.learning_rate)

        base = self._base(X)
        base_val = self._base(X_val) if X_val is not None else None

        def val_loss(p):
            if X_val is None:
                delta, _ = model.forward(X, params=p, train=False)
                return float(np.mean((base + delta - y) ** 2))
            delta, _ = model.forward(X_val, params=p, train=False)
            return float(np.mean((base_val + delta - y_val) ** 2))

        best_loss = val_loss(params)
        best_params = {k: v.copy() for k, v in params.items()}
        epochs_since_best = 0
        halvings = 0
        n = X.shape[0]
        epochs_run = 0

        for epoch in range(self.max_epochs):
            order = shuffle_rng.permutation(n)
            try:
                for start in range(0, n, self.batch_size):
                    idx = order[start : start + self.batch_size]
                    loss, grads = model.loss_and_gradient(
                        X[idx], base[idx], y[idx], params=params, train=True, rng=dropout_rng
                    )
                    if self.weight_decay:
                        for k in grads:
                            grads[k] += self.weight_decay * params[k]
                    adam.step(params, grads)
            except FloatingPointError:
                halvings += 1
                if halvings > self.max_lr_halvings:
                    raise DivergenceError(f"training diverged after {halvings - 1} learning-rate halvings") from None
                adam = Adam(best_params, learning_rate=adam.learning_rate * 0.5)
                params = {k: v.copy() for k, v in best_params.items()}
                continue
            epochs_run = epoch + 1
            cur = val_loss(params)
            if cur < best_loss:
                best_loss = cur
                best_params = {k: v.copy() for k, v in params.items()}
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= self.patience:
                    break

        model.set_params_dict(best_params)
        self.model_ = model
        self.best_val_loss_ = best_loss
        self.epochs_run_ = epochs_run
        self.lr_halvings_ = halvings
        return self

    def _check_y(self, y, n_rows):
        raise NotImplementedError

    def _delta(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise RuntimeError("refiner is not fitted; call fit() or load_refiner()")
        delta, _ = self.model_.forward(X, train=False)
        return delta


class AngleRefiner(_ResidualRefiner, RegressorMixin):
    """Refines the K unit directions of a K-means solution (3K-wide head)."""

    _kind = "angle"

    def _out_dim(self) -> int:
        return 3 * self.n_tx

    def _base(self, X):
        return features_to_dirs(X).reshape(X.shape[0], -1)

    def _check_y(self, y, n_rows):
        y = np.asarray(y, dtype=np.float64)
        if y.shape == (n_rows, self.n_tx, 3):
            y = y.reshape(n_rows, -1)
        if y.shape != (n_rows, 3 * self.n_tx):
            raise ValueError(f"angle targets must be (n, K, 3) or (n, 3K), got {y.shape}")
        return y

    def predict(self, X) -> np.ndarray:
        dirs, _ = self.predict_with_flags(X)
        return dirs

    def predict_with_flags(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Corrected unit directions (n, K, 3) plus a mask of rescue fallbacks.

        A corrected vector too short to normalize keeps its K-means direction
        and is flagged.
        """
        X = self._check_X(X)
        base = features_to_dirs(X)
        delta = self._delta(X).reshape(X.shape[0], self.n_tx, 3)
        corrected = base + delta
        norms = np.linalg.norm(corrected, axis=2)
        degenerate = norms < 1e-12
        safe = np.where(degenerate[:, :, None], base, corrected / np.where(degenerate, 1.0, norms)[:, :, None])
        return safe, degenerate


class SizeRefiner(_ResidualRefiner, RegressorMixin):
    """Refines the K cluster sizes of a K-means solution (K-wide head)."""

    _kind = "size"

    def _out_dim(self) -> int:
        return self.n_tx

    def _base(self, X):
        return features_to_sizes(X)

    def _check_y(self, y, n_rows):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (n_rows, self.n_tx):
            raise ValueError(f"size targets must be (n, K) normalized sizes, got {y.shape}")
        return y

    def predict(self, X, base_sizes, n_emitted: int) -> np.ndarray:
        """Corrected sizes in molecule counts, clamped to [0, n_emitted].

        ``base_sizes`` are the raw K-means cluster sizes (n, K); the
        correction is applied in count units so a zero head returns them
        bit-for-bit (within the clamp range).
        """
        X = self._check_X(X)
        base_sizes = np.asarray(base_sizes, dtype=np.float64)
        if base_sizes.shape != (X.shape[0], self.n_tx):
            raise ValueError(f"base_sizes must be (n, {self.n_tx}), got {base_sizes.shape}")
        delta = self._delta(X)
        return np.clip(base_sizes + delta * float(n_emitted), 0.0, float(n_emitted))


def save_weights(path, refiner: _ResidualRefiner, training_meta: dict | None = None) -> None:
    """Serialize a fitted refiner to versioned JSON with exact float round-trip."""
    model = refiner.model_
    doc = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "kind": refiner._kind,
        "n_tx": refiner.n_tx,
        "hidden_dim": refiner.hidden_dim,
        "n_blocks": refiner.n_blocks,
        "dropout": refiner.dropout,
        "shapes": {k: list(v) for k, v in model.param_shapes().items()},
        "params": {k: v.reshape(-1).tolist() for k, v in model.params.items()},
        "training": dict(training_meta or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_refiner(path) -> AngleRefiner | SizeRefiner:
    """Rebuild a fitted refiner from a weights file written by save_weights."""
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version!r}")
    kind = doc["kind"]
    cls = {"angle": AngleRefiner, "size": SizeRefiner}.get(kind)
    if cls is None:
        raise ValueError(f"unknown model kind {kind!r}")
    ref = cls(n_tx=doc["n_tx"], hidden_dim=doc["hidden_dim"], n_blocks=doc["n_blocks"], dropout=doc["dropout"])
    model = ref._make_model()
    shapes = model.param_shapes()
    params = {}
    for name, shape in shapes.items():
        flat = np.asarray(doc["params"][name], dtype=np.float64)
        params[name] = flat.reshape(shape)
    model.set_params_dict(params)
    ref.model_ = model
    ref.training_meta_ = doc.get("training", {})
    return ref
