"""Contrastive pretraining objectives and binary cross-entropy, with analytic gradients.

Gradients are taken with respect to the (already L2-normalised) features
that are passed in; chaining through the normalisation and the projection
heads is done by :func:`pecon.neuralnet.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, logsumexp, softmax

from .errors import DegenerateBatchError, EmptyInputError, ShapeError


@dataclass
class LossResult:
    value: float
    grad: np.ndarray | tuple[np.ndarray, ...]


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def pecon_loss(z, labels, tau=0.8):
    """Supervised contrastive loss over ``2B`` cross-modal features.

    Rows ``0..B-1`` of ``z`` are CT features and rows ``B..2B-1`` the EHR
    features of the same patients, so ``labels[i] == labels[B + i]``. Every
    row is an anchor; its candidates are all other rows and its positives
    the other rows sharing its label. Per-anchor terms are summed, not
    averaged.
    """
    _check_tau(tau)
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    if z.ndim != 2 or n < 2 or n % 2:
        raise ShapeError(f"z must be a 2B x d matrix with B >= 1, got shape {z.shape}")
    if labels.shape != (n,):
        raise ShapeError(f"labels must have length {n}, got {labels.shape}")
    b = n // 2
    if np.any(labels[:b] != labels[b:]):
        raise ValueError("labels of paired CT/EHR rows disagree")

    logits = z @ z.T / tau
    np.fill_diagonal(logits, -np.inf)
    positive = labels[:, None] == labels[None, :]
    np.fill_diagonal(positive, False)
    n_pos = positive.sum(axis=1)

    log_denom = logsumexp(logits, axis=1)
    log_prob = logits - log_denom[:, None]
    value = -np.sum(np.where(positive, log_prob, 0.0).sum(axis=1) / n_pos)

    # d value / d logits[i, a] = softmax_i(a) - [a in P(i)] / |P(i)|
    coef = softmax(logits, axis=1) - positive / n_pos[:, None]
    coef /= tau
    grad = coef @ z + coef.T @ z
    return LossResult(float(value), grad)


def infonce_loss(z_c, z_e, tau=0.8, direction_weight=0.5):
    """Bidirectional InfoNCE between paired CT and EHR features.

    ``direction_weight`` weighs the CT-to-EHR direction; the EHR-to-CT
    direction gets ``1 - direction_weight``. Averaged over the batch.
    """
    _check_tau(tau)
    z_c = np.asarray(z_c, dtype=np.float64)
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_c.ndim != 2 or z_c.shape != z_e.shape or z_c.shape[0] < 1:
        raise ShapeError(f"z_c {z_c.shape} and z_e {z_e.shape} must be equal non-empty matrices")
    if not 0 <= direction_weight <= 1:
        raise ValueError("direction_weight must lie in [0, 1]")
    b = z_c.shape[0]
    w = direction_weight
    logits = z_c @ z_e.T / tau
    diag = np.diag(logits)
    loss_ce = logsumexp(logits, axis=1) - diag
    loss_ec = logsumexp(logits, axis=0) - diag
    value = np.sum(w * loss_ce + (1 - w) * loss_ec) / b

    eye = np.eye(b)
    coef = (w * (softmax(logits, axis=1) - eye) + (1 - w) * (softmax(logits, axis=0) - eye)) / (b * tau)
    return LossResult(float(value), (coef @ z_e, coef.T @ z_c))


def _standardize(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if np.any(std <= 1e-12):
        raise DegenerateBatchError("a feature column has zero variance over the batch")
    return (x - mean) / std, std


def _standardize_backward(grad, xhat, std):
    # population standardisation: d xhat_i / d x_j = (delta_ij - 1/B - xhat_i xhat_j / B) / std
    return (grad - grad.mean(axis=0) - xhat * (grad * xhat).mean(axis=0)) / std


def barlow_twins_loss(z_c, z_e, lambda_bt=0.005):
    """Redundancy-reduction loss on the cross-correlation of standardised views.

    Columns are standardised with the population (1/B) standard deviation so
    that identical views yield a cross-correlation of exactly one.
    """
    z_c = np.asarray(z_c, dtype=np.float64)
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_c.ndim != 2 or z_c.shape != z_e.shape:
        raise ShapeError(f"z_c {z_c.shape} and z_e {z_e.shape} must be equal matrices")
    b = z_c.shape[0]
    if b < 2:
        raise DegenerateBatchError("Barlow Twins needs a batch of at least 2")
    if lambda_bt < 0:
        raise ValueError("lambda_bt must be non-negative")
    c_hat, c_std = _standardize(z_c)
    e_hat, e_std = _standardize(z_e)
    corr = c_hat.T @ e_hat / b
    on = np.diag(corr)
    off = corr - np.diag(on)
    value = np.sum((1 - on) ** 2) + lambda_bt * np.sum(off**2)

    d_corr = 2 * lambda_bt * off - np.diag(2 * (1 - on))
    d_chat = e_hat @ d_corr.T / b
    d_ehat = c_hat @ d_corr / b
    return LossResult(
        float(value),
        (_standardize_backward(d_chat, c_hat, c_std), _standardize_backward(d_ehat, e_hat, e_std)),
    )


def binary_cross_entropy(logits, labels):
    """Mean binary cross-entropy on raw logits; gradient is ``(sigmoid - y) / B``."""
    x = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInputError("binary_cross_entropy on an empty batch")
    if x.shape != y.shape:
        raise ShapeError(f"logits {x.shape} and labels {y.shape} differ")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    value = -np.mean(y * log_expit(x) + (1 - y) * log_expit(-x))
    p = np.exp(log_expit(x))
    return LossResult(float(value), (p - y) / x.size)
