"""Local learner: logistic model, losses, gradients, private release, SGD.

All operations are pure functions of their arguments plus an explicitly
passed random generator, so callers may evaluate different users'
gradients concurrently as long as each task owns its own generator.
``theta`` is always the full parameter vector including the leading
intercept, so ``len(theta) == feature_dim + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class ModelParams:
    """Weight vector of the logistic model, intercept first."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 1 or theta.size < 2:
            raise ValueError("theta must be a vector of length >= 2 (intercept plus weights)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta entries must be finite")
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class DpConfig:
    """Clip-and-noise release parameters. The defaults disable the mechanism."""

    clip_norm: float = math.inf
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.noise_sigma > 0 and not math.isfinite(self.clip_norm):
            raise ValueError("noise_sigma > 0 requires a finite clip_norm")


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    k: int
    max_iterations: int
    straggler_cutoff: float
    rounds: int

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.straggler_cutoff > 0:
            raise ValueError("straggler_cutoff must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")


def _check_dims(theta: np.ndarray, xs: np.ndarray) -> None:
    if xs.shape[-1] + 1 != theta.shape[0]:
        raise ValueError(
            f"dimension mismatch: features have {xs.shape[-1]} columns, theta has {theta.shape[0]} entries"
        )


def predict(theta: np.ndarray, x: np.ndarray) -> np.ndarray | float:
    """Success probability expit(theta . [1, x]); accepts one row or a matrix."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_dims(theta, x)
    p = expit(theta[0] + x @ theta[1:])
    return float(p) if p.ndim == 0 else p


def local_loss(theta: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> float:
    """Mean binary cross-entropy over one user's private samples.

    Computed as logaddexp(0, logit) - y * logit, which is exact and stable
    for large logits of either sign.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape[0] == 0:
        raise ValueError("empty dataset")
    theta = np.asarray(theta, dtype=float)
    _check_dims(theta, xs)
    logits = theta[0] + xs @ theta[1:]
    return float(np.mean(np.logaddexp(0.0, logits) - ys * logits))


def local_gradient(theta: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Exact gradient of local_loss with respect to theta."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape[0] == 0:
        raise ValueError("empty dataset")
    theta = np.asarray(theta, dtype=float)
    _check_dims(theta, xs)
    resid = expit(theta[0] + xs @ theta[1:]) - ys
    g = np.empty_like(theta)
    g[0] = resid.mean()
    g[1:] = xs.T @ resid / xs.shape[0]
    return g


def privatize(g: np.ndarray, dp: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Scale the gradient to norm <= clip_norm, then add isotropic Gaussian
    noise with per-coordinate standard deviation noise_sigma * clip_norm."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    out = g
    if math.isfinite(dp.clip_norm):
        norm = float(np.linalg.norm(g))
        if norm > 0:
            out = g * min(1.0, dp.clip_norm / norm)
        out = np.array(out, dtype=float, copy=True)
    if dp.noise_sigma > 0:
        out = out + rng.normal(0.0, dp.noise_sigma * dp.clip_norm, size=g.shape)
    return out


def aggregate(gradients: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the received gradients."""
    if len(gradients) == 0:
        raise ValueError("no gradients to aggregate")
    stacked = np.asarray(gradients, dtype=float)
    if stacked.ndim != 2:
        raise ValueError("gradients must share one dimension")
    return stacked.mean(axis=0)


def sgd_step(theta: np.ndarray, g_bar: np.ndarray, eta: float) -> np.ndarray:
    """theta - eta * g_bar."""
    theta = np.asarray(theta, dtype=float)
    g_bar = np.asarray(g_bar, dtype=float)
    if theta.shape != g_bar.shape:
        raise ValueError("theta and gradient shapes differ")
    if not np.all(np.isfinite(g_bar)):
        raise ValueError("aggregated gradient must be finite")
    return theta - eta * g_bar


def evaluate_accuracy(theta: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> float:
    """Fraction of samples whose thresholded prediction (p >= 0.5) matches the label."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape[0] == 0:
        raise ValueError("empty test set")
    p = predict(theta, xs)
    return float(np.mean((p >= 0.5) == (ys >= 0.5)))
