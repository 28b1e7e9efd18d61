"""Nonlinearities that turn a scalar latent field into two disjoint alpha maps.

The chain used by the synthesis pipeline is

    clamp01 -> softmax_binning -> maxout_disjoint -> (binarize for intensity support)

Each differentiable op comes with an explicit vector-Jacobian product.
binarize is a hard threshold and by contract contributes no gradient at all;
learning signal reaches the latent field only through the continuous alpha
values that scale each layer's flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BinningConfig:
    """Temperature and bin layout for two-way softmax binning.

    Bin i maps the input p to the logit (slope_i * p - cutoff_i) / tau.
    With the default slopes (1, 2) and cutoffs (0, 0.5) the two logits cross
    at p = 0.5, so bin 1 wins for p above 0.5 and bin 0 below. Smaller tau
    sharpens the assignment toward one-hot.
    """

    tau: float = 0.1
    slopes: tuple = (1.0, 2.0)
    cutoffs: tuple = (0.0, 0.5)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_dorelu(x: np.ndarray, gamma: float = 10.0) -> np.ndarray:
    """Doubly rectified leaky activation.

    Identity on [0, 1]; slope 1/gamma below 0 and above 1, so the output is
    softly confined to the unit interval instead of hard-capped.
    """
    if not gamma > 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 1, 1 + (x - 1) / gamma, np.where(x < 0, x / gamma, x))


def leaky_dorelu_vjp(grad: np.ndarray, x: np.ndarray, gamma: float = 10.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    slope = np.where((x > 1) | (x < 0), 1.0 / gamma, 1.0)
    return np.asarray(grad, dtype=np.float64) * slope


def clamp01(x: np.ndarray) -> np.ndarray:
    """Hard clamp to [0, 1]."""
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)


def clamp01_vjp(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient passes only strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    inside = (x > 0.0) & (x < 1.0)
    return np.asarray(grad, dtype=np.float64) * inside


def softmax_binning(p: np.ndarray, cfg: BinningConfig) -> tuple[np.ndarray, np.ndarray]:
    """Softly assign each value of p to one of two bins.

    Returns (alpha0, alpha1) with alpha0 + alpha1 = 1 pixelwise. For a
    two-way softmax only the logit difference matters, so the pair is
    computed as a logistic of that difference, which is numerically stable
    at any temperature.
    """
    p = np.asarray(p, dtype=np.float64)
    d = ((cfg.slopes[1] - cfg.slopes[0]) * p - (cfg.cutoffs[1] - cfg.cutoffs[0])) / cfg.tau
    alpha1 = _sigmoid(d)
    alpha0 = _sigmoid(-d)
    return alpha0, alpha1


def softmax_binning_vjp(
    grad0: np.ndarray,
    grad1: np.ndarray,
    alpha0: np.ndarray,
    alpha1: np.ndarray,
    cfg: BinningConfig,
) -> np.ndarray:
    """Cotangents on (alpha0, alpha1) pulled back to the input p."""
    scale = (cfg.slopes[1] - cfg.slopes[0]) / cfg.tau
    return (np.asarray(grad1) - np.asarray(grad0)) * alpha0 * alpha1 * scale


def maxout_disjoint(alpha0: np.ndarray, alpha1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Winner-take-all over the two alpha maps.

    The larger value is kept, the other is set to exactly 0. Exact ties keep
    bin 0 so the operation is deterministic.
    """
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    alpha1 = np.asarray(alpha1, dtype=np.float64)
    if alpha0.shape != alpha1.shape:
        raise ValueError(f"alpha shapes differ: {alpha0.shape} vs {alpha1.shape}")
    keep0 = alpha0 >= alpha1
    return np.where(keep0, alpha0, 0.0), np.where(keep0, 0.0, alpha1)


def maxout_disjoint_vjp(
    grad0: np.ndarray,
    grad1: np.ndarray,
    alpha0: np.ndarray,
    alpha1: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Route cotangents to the winning entry only (alpha0/alpha1 pre-maxout)."""
    keep0 = np.asarray(alpha0) >= np.asarray(alpha1)
    return (
        np.where(keep0, np.asarray(grad0, dtype=np.float64), 0.0),
        np.where(keep0, 0.0, np.asarray(grad1, dtype=np.float64)),
    )


def binarize(alpha: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard mask (alpha > threshold), strict inequality.

    This op has no vjp on purpose: the backward pass treats it as a constant.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(alpha, dtype=np.float64) > threshold).astype(np.uint8)
