"""Small dense-math kernel shared by the neural models."""

from __future__ import annotations

import numpy as np

__all__ = ["ShapeMismatch", "PROB_FLOOR", "glorot", "relu", "softmax", "cross_entropy", "one_hot"]

PROB_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true labels, probabilities floored."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{probs.shape[0]} rows vs {labels.shape[0]} labels")
    if labels.size == 0:
        return 0.0
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def softmax_ce_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the logits.

    Rows whose true-label probability sits below the floor contribute a
    constant to the loss, so their gradient is zero.
    """
    n = len(labels)
    g = probs - one_hot(labels, probs.shape[1])
    live = probs[np.arange(n), labels] >= PROB_FLOOR
    g[~live] = 0.0
    return g / max(n, 1)
