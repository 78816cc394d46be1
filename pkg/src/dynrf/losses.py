"""Photometric Huber loss, mask BCE, and their combination."""

from __future__ import annotations

import numpy as np

from .errors import DomainError

HUBER_DELTA = 0.01
BCE_WEIGHT = 1e-3
BCE_EPS = 1e-6


def huber_loss(pred, gt, delta: float = HUBER_DELTA):
    """Huber penalty averaged over the 3 color channels (per ray if batched)."""
    if delta <= 0:
        raise DomainError("delta must be positive")
    l = np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64))
    per = np.where(l <= delta, 0.5 * l * l, delta * (l - 0.5 * delta))
    return per.mean(axis=-1)


def huber_grad(pred, gt, delta: float = HUBER_DELTA):
    """d huber_loss / d pred."""
    diff = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    g = np.where(np.abs(diff) <= delta, diff, delta * np.sign(diff))
    return g / diff.shape[-1]


def bce_mask_loss(acc_weight, gt_mask, eps: float = BCE_EPS):
    """-[M log M^ + (1 - M) log(1 - M^)] with M^ clamped to [eps, 1 - eps]."""
    m_hat = np.clip(np.asarray(acc_weight, np.float64), eps, 1 - eps)
    m = np.asarray(gt_mask, np.float64)
    return -(m * np.log(m_hat) + (1 - m) * np.log(1 - m_hat))


def bce_grad(acc_weight, gt_mask, eps: float = BCE_EPS):
    a = np.asarray(acc_weight, np.float64)
    m_hat = np.clip(a, eps, 1 - eps)
    m = np.asarray(gt_mask, np.float64)
    g = -m / m_hat + (1 - m) / (1 - m_hat)
    return np.where((a > eps) & (a < 1 - eps), g, 0.0)


def total_loss(pred_color, gt_color, acc_weight, gt_mask,
               delta: float = HUBER_DELTA, beta: float = BCE_WEIGHT):
    """Mean Huber over rays plus ``beta`` times mean BCE.

    Returns ``(total, photometric, bce)``.
    """
    pred_color = np.asarray(pred_color).reshape(-1, 3)
    if len(pred_color) == 0:
        raise DomainError("empty batch")
    pho = float(huber_loss(pred_color, np.asarray(gt_color).reshape(-1, 3), delta).mean())
    bce = float(bce_mask_loss(np.asarray(acc_weight).reshape(-1), np.asarray(gt_mask).reshape(-1)).mean())
    return pho + beta * bce, pho, bce


def total_loss_grads(pred_color, gt_color, acc_weight, gt_mask,
                     delta: float = HUBER_DELTA, beta: float = BCE_WEIGHT):
    """Gradients of :func:`total_loss` w.r.t. the rendered colors and weights."""
    R = len(pred_color)
    g_color = huber_grad(pred_color, gt_color, delta) / R
    g_acc = beta * bce_grad(acc_weight, gt_mask) / R
    return g_color, g_acc
