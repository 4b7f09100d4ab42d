"""Appearance MLP: (features, view direction) -> RGB, and its Lipschitz bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN = 128


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split branches keep exp() from overflowing
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def encode_direction(directions: np.ndarray, n_freqs: int = 0) -> np.ndarray:
    """Raw direction, optionally followed by sin/cos bands at 2^k frequencies."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if n_freqs == 0:
        return d
    freqs = 2.0 ** np.arange(n_freqs)
    ang = (d[:, None, :] * freqs[None, :, None]).reshape(d.shape[0], -1)
    return np.concatenate([d, np.sin(ang), np.cos(ang)], axis=1)


def direction_dim(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


@dataclass
class AppearanceDecoder:
    """One-hidden-layer MLP ``sigmoid(w2 @ relu(w1 @ [f; enc(d)] + b1) + b2)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    feature_dim: int
    dir_freqs: int = 0

    def __post_init__(self) -> None:
        in_dim = self.feature_dim + direction_dim(self.dir_freqs)
        hidden = self.w1.shape[0]
        if self.w1.shape != (hidden, in_dim):
            raise ValueError(f"w1 shape {self.w1.shape}, expected {(hidden, in_dim)}")
        if self.b1.shape != (hidden,) or self.w2.shape != (3, hidden) or self.b2.shape != (3,):
            raise ValueError("decoder bias/output shapes inconsistent")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(
        cls,
        feature_dim: int,
        rng: np.random.Generator | None = None,
        hidden: int = HIDDEN,
        dir_freqs: int = 0,
    ) -> "AppearanceDecoder":
        """Kaiming-uniform (fan-in) weights, zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        in_dim = feature_dim + direction_dim(dir_freqs)
        w1 = rng.uniform(-1, 1, (hidden, in_dim)) * np.sqrt(6.0 / in_dim)
        w2 = rng.uniform(-1, 1, (3, hidden)) * np.sqrt(3.0 / hidden)
        return cls(w1, np.zeros(hidden), w2, np.zeros(3), feature_dim, dir_freqs)

    @classmethod
    def zeros(cls, feature_dim: int, hidden: int = HIDDEN, dir_freqs: int = 0) -> "AppearanceDecoder":
        in_dim = feature_dim + direction_dim(dir_freqs)
        return cls(
            np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros((3, hidden)), np.zeros(3),
            feature_dim, dir_freqs,
        )

    def copy(self) -> "AppearanceDecoder":
        return AppearanceDecoder(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.feature_dim, self.dir_freqs,
        )

    def num_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


def _inputs(dec: AppearanceDecoder, features: np.ndarray, directions: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    feats = features.reshape(-1, features.shape[-1])
    if feats.shape[1] != dec.feature_dim:
        raise ValueError(f"expected {dec.feature_dim} features, got {feats.shape[1]}")
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if dirs.shape[0] == 1 and feats.shape[0] > 1:
        dirs = np.broadcast_to(dirs, (feats.shape[0], 3))
    if dirs.shape[0] != feats.shape[0]:
        raise ValueError("features and directions disagree on batch size")
    return np.concatenate([feats, encode_direction(dirs, dec.dir_freqs)], axis=1)


def decode(dec: AppearanceDecoder, features: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """RGB in (0, 1) for one feature vector (F,) or a batch (P, F).

    Directions must be unit vectors (to 1e-6).
    """
    direction = np.asarray(direction, dtype=np.float64)
    norms = np.linalg.norm(direction.reshape(-1, 3), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("view directions must be unit vectors")
    x = _inputs(dec, features, direction)
    h = np.maximum(x @ dec.w1.T + dec.b1, 0.0)
    rgb = sigmoid(h @ dec.w2.T + dec.b2)
    return rgb[0] if np.asarray(features).ndim == 1 else rgb


def feature_jacobian(dec: AppearanceDecoder, features: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Analytic d rgb / d features for a single input; shape (3, F)."""
    x = _inputs(dec, features, direction)[0]
    z1 = dec.w1 @ x + dec.b1
    rgb = sigmoid(dec.w2 @ np.maximum(z1, 0.0) + dec.b2)
    gate = (z1 > 0).astype(np.float64)
    J = (rgb * (1 - rgb))[:, None] * (dec.w2 * gate[None, :]) @ dec.w1[:, : dec.feature_dim]
    return J


def spectral_norm(W: np.ndarray, n_iter: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        return 0.0
    u = np.random.default_rng(seed).normal(size=W.shape[1])
    u /= np.linalg.norm(u)
    for _ in range(max(n_iter, 50)):
        v = W @ u
        v /= np.linalg.norm(v)
        u = W.T @ v
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        u /= norm
    return float(np.linalg.norm(W @ u))


def lipschitz_upper_bound(dec: AppearanceDecoder, n_iter: int = 500) -> float:
    """Upper bound on the decoder's Lipschitz constant w.r.t. its feature input.

    ``0.25 * ||w2||_2 * ||w1[:, :F]||_2``: sigmoid contributes 1/4, ReLU 1.
    """
    s1 = spectral_norm(dec.w1[:, : dec.feature_dim], n_iter)
    s2 = spectral_norm(dec.w2, n_iter)
    return 0.25 * s1 * s2
