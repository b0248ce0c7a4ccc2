"""Weighted soft-margin triplet loss and its gradient."""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def softplus(x):
    """ln(1 + e^x) without overflow: max(x, 0) + log1p(e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def triplet_loss(p_a, q_pos, q_neg, alpha: float = 5.0) -> float:
    """ln(1 + exp(alpha * (|p_a - q_pos| - |p_a - q_neg|)))."""
    p_a, q_pos, q_neg = (np.asarray(v, dtype=np.float64) for v in (p_a, q_pos, q_neg))
    d_pos = np.linalg.norm(p_a - q_pos)
    d_neg = np.linalg.norm(p_a - q_neg)
    return float(softplus(alpha * (d_pos - d_neg)))


def loss_from_distances(d_pos, d_neg, alpha: float = 5.0):
    return softplus(alpha * (np.asarray(d_pos) - np.asarray(d_neg)))


def batch_triplet_loss(P, Qp, Qn, alpha: float):
    """Mean loss over rows and its gradients w.r.t. P, Qp and Qn.

    A zero distance has a zero (sub)gradient.
    """
    B = len(P)
    dp_vec = P - Qp
    dn_vec = P - Qn
    d_pos = np.linalg.norm(dp_vec, axis=1)
    d_neg = np.linalg.norm(dn_vec, axis=1)
    x = alpha * (d_pos - d_neg)
    loss = float(softplus(x).mean())
    s = expit(x) * alpha / B
    up = dp_vec / np.where(d_pos > 0, d_pos, 1.0)[:, None]
    un = dn_vec / np.where(d_neg > 0, d_neg, 1.0)[:, None]
    up[d_pos == 0] = 0.0
    un[d_neg == 0] = 0.0
    gP = s[:, None] * (up - un)
    return loss, gP, -s[:, None] * up, s[:, None] * un
