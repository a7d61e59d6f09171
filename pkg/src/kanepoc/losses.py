"""Cross-entropy losses on probability outputs, with their derivatives.

Probabilities are clamped to ``[EPS, 1 - EPS]`` before taking logs. Row sums
use :func:`math.fsum`, so the loss does not depend on row order.
"""
import math

import numpy as np

EPS = 1e-12


def _weights(n, weights):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per row")
    return w


def _elementwise(alpha, delta):
    a = np.clip(alpha, EPS, 1.0 - EPS)
    terms = -(delta * np.log(a) + (1.0 - delta) * np.log1p(-a))
    inside = (alpha > EPS) & (alpha < 1.0 - EPS)
    dterms = np.where(inside, -(delta / a - (1.0 - delta) / (1.0 - a)), 0.0)
    return terms, dterms


def bce_loss(predictions, outcomes, weights=None):
    """Mean binary cross-entropy ``-(1/n) sum[d log a + (1 - d) log(1 - a)]``."""
    value, _ = bce_loss_and_grad(predictions, outcomes, weights)
    return value


def bce_loss_and_grad(predictions, outcomes, weights=None):
    alpha = np.asarray(predictions, dtype=np.float64).ravel()
    delta = np.asarray(outcomes, dtype=np.float64).ravel()
    if alpha.size == 0:
        raise ValueError("empty batch")
    if alpha.shape != delta.shape:
        raise ValueError("predictions and outcomes differ in length")
    if not np.isin(delta, (0.0, 1.0)).all():
        raise ValueError("binary outcomes must be 0 or 1")
    w = _weights(alpha.size, weights)
    total = math.fsum(w)
    terms, dterms = _elementwise(alpha, delta)
    return math.fsum(w * terms) / total, (w / total) * dterms


def ce_loss(predictions, outcomes, weights=None):
    """Multi-class cross-entropy summed over all categories of each row.

    Every category contributes ``d log a + (1 - d) log(1 - a)``, not only the
    observed one.
    """
    value, _ = ce_loss_and_grad(predictions, outcomes, weights)
    return value


def ce_loss_and_grad(predictions, outcomes, weights=None, simplex_tol=1e-9):
    alpha = np.asarray(predictions, dtype=np.float64)
    delta = np.asarray(outcomes, dtype=np.float64)
    if alpha.ndim != 2 or alpha.shape[0] == 0:
        raise ValueError("expected a non-empty n x J matrix of predictions")
    if alpha.shape != delta.shape:
        raise ValueError("predictions and outcomes differ in shape")
    if np.abs(alpha.sum(axis=1) - 1.0).max() > simplex_tol or alpha.min() < 0:
        raise ValueError("prediction rows must lie on the probability simplex")
    if not (np.isin(delta, (0.0, 1.0)).all() and (delta.sum(axis=1) == 1).all()):
        raise ValueError("outcomes must be one-hot rows")
    w = _weights(alpha.shape[0], weights)
    total = math.fsum(w)
    terms, dterms = _elementwise(alpha, delta)
    value = math.fsum((w[:, None] * terms).ravel()) / total
    return value, (w / total)[:, None] * dterms
