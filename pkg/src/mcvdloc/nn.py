"""Residual MLP with hand-written forward, backward, and Adam updates.

Architecture: affine stem to a 256-wide hidden state, six residual blocks
(each: affine, ReLU, dropout, affine, skip connection), and an affine head
whose output is a correction added to a caller-supplied residual base.  The
head starts at zero so an untrained network reproduces the base exactly.

Parameters live in an ordered {name: array} dict; gradients mirror it.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ResidualMLP", "Adam"]


class ResidualMLP:
    """Correction network: predicts a delta added to a residual base.

    Parameters
    ----------
    in_dim, out_dim : int
    hidden_dim : int, default 256
    n_blocks : int, default 6
    dropout : float in [0, 1), default 0.1
        Applied between the two affine maps of each block, training mode only
        (inverted dropout, so inference needs no rescaling).
    """

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int = 256, n_blocks: int = 6, dropout: float = 0.1):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden_dim = int(hidden_dim)
        self.n_blocks = int(n_blocks)
        self.dropout = float(dropout)
        self.params: dict[str, np.ndarray] | None = None

    # -- parameters ----------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"stem.W": (self.in_dim, self.hidden_dim), "stem.b": (self.hidden_dim,)}
        for i in range(self.n_blocks):
            shapes[f"block{i}.W1"] = (self.hidden_dim, self.hidden_dim)
            shapes[f"block{i}.b1"] = (self.hidden_dim,)
            shapes[f"block{i}.W2"] = (self.hidden_dim, self.hidden_dim)
            shapes[f"block{i}.b2"] = (self.hidden_dim,)
        shapes["head.W"] = (self.hidden_dim, self.out_dim)
        shapes["head.b"] = (self.out_dim,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Fan-in-scaled Gaussian init everywhere except the head, which is zero."""
        params = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("head") or name.endswith("b") or name.endswith("b1") or name.endswith("b2"):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[0]
                params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
        self.params = params
        return params

    def set_params_dict(self, params: dict[str, np.ndarray]) -> None:
        expect = self.param_shapes()
        if set(params) != set(expect):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expect.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    # -- forward / backward ----------------------------------------------------

    def forward(self, X, params=None, train: bool = False, rng: np.random.Generator | None = None):
        """Return (delta, cache). X is (n, in_dim); delta is (n, out_dim)."""
        p = self.params if params is None else params
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"X must be (n, {self.in_dim}), got {X.shape}")
        if train and self.dropout > 0.0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")

        h = X @ p["stem.W"] + p["stem.b"]
        cache = {"X": X, "h_in": [], "a1": [], "z": [], "masks": []}
        for i in range(self.n_blocks):
            cache["h_in"].append(h)
            a1 = h @ p[f"block{i}.W1"] + p[f"block{i}.b1"]
            z = np.maximum(a1, 0.0)
            if train and self.dropout > 0.0:
                mask = (rng.random(z.shape) >= self.dropout) / (1.0 - self.dropout)
                z = z * mask
            else:
                mask = None
            h = h + z @ p[f"block{i}.W2"] + p[f"block{i}.b2"]
            cache["a1"].append(a1)
            cache["z"].append(z)
            cache["masks"].append(mask)
        cache["h_out"] = h
        delta = h @ p["head.W"] + p["head.b"]
        return delta, cache

    def backward(self, cache, d_delta, params=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss wrt all parameters, given dL/d(delta)."""
        p = self.params if params is None else params
        grads = {}
        h_out = cache["h_out"]
        grads["head.W"] = h_out.T @ d_delta
        grads["head.b"] = d_delta.sum(axis=0)
        dh = d_delta @ p["head.W"].T
        for i in reversed(range(self.n_blocks)):
            z, a1, h_in, mask = cache["z"][i], cache["a1"][i], cache["h_in"][i], cache["masks"][i]
            dz = dh @ p[f"block{i}.W2"].T
            grads[f"block{i}.W2"] = z.T @ dh
            grads[f"block{i}.b2"] = dh.sum(axis=0)
            if mask is not None:
                dz = dz * mask
            da1 = dz * (a1 > 0.0)
            grads[f"block{i}.W1"] = h_in.T @ da1
            grads[f"block{i}.b1"] = da1.sum(axis=0)
            # skip connection: gradient flows both through the block and around it
            dh = dh + da1 @ p[f"block{i}.W1"].T
        grads["stem.W"] = cache["X"].T @ dh
        grads["stem.b"] = dh.sum(axis=0)
        return grads

    def loss_and_gradient(self, X, base, target, params=None, train: bool = False, rng=None):
        """Mean-squared-error loss of (base + delta) against target, with gradients.

        ``base`` and ``target`` are (n, out_dim) in the same units as the
        head output.  Returns (loss, grads); raises FloatingPointError when
        the loss is not finite (training divergence signal).
        """
        base = np.asarray(base, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        delta, cache = self.forward(X, params=params, train=train, rng=rng)
        resid = base + delta - target
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite training loss")
        d_delta = (2.0 / resid.size) * resid
        return loss, self.backward(cache, d_delta, params=params)


class Adam:
    """Adaptive-moment gradient descent with bias-corrected estimates."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.learning_rate * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
