"""Training objectives for linear scorers, with analytic gradients.

Each batched function returns ``(mean_loss, grad_weights, grad_bias)``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def margin_ranking_loss(s_a: float, s_b: float, y: int, margin: float = 1.0) -> float:
    """``max(0, -y * (s_a - s_b) + margin)``."""
    return max(0.0, -y * (s_a - s_b) + margin)


def pairwise_loss_grad(
    w: np.ndarray,
    b: float,
    xa: sp.spmatrix,
    xb: sp.spmatrix,
    y: np.ndarray,
    margin: float,
) -> tuple[float, np.ndarray, float]:
    diff = xa - xb
    # the bias cancels inside s_a - s_b
    gap = diff @ w
    hinge = -y * gap + margin
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).sum()) / len(y)
    coef = np.where(active, -y, 0).astype(float) / len(y)
    grad = np.asarray(diff.T @ coef).ravel()
    return loss, grad, 0.0


def pointwise_l1_loss_grad(
    w: np.ndarray,
    b: float,
    x: sp.spmatrix,
    target: np.ndarray,
) -> tuple[float, np.ndarray, float]:
    resid = x @ w + b - target
    loss = float(np.abs(resid).sum()) / len(target)
    sign = np.sign(resid) / len(target)
    return loss, np.asarray(x.T @ sign).ravel(), float(sign.sum())


def listmle_loss(scores: np.ndarray) -> np.ndarray:
    """ListMLE negative log-likelihood per list.

    ``scores`` has shape ``(n_lists, k)`` with columns already in the true
    order (longest output first).
    """
    s = scores - scores.max(axis=1, keepdims=True)
    # suffix log-sum-exp: lse[:, i] = log sum_{j >= i} exp(s[:, j])
    lse = np.logaddexp.accumulate(s[:, ::-1], axis=1)[:, ::-1]
    return (lse - s).sum(axis=1)


def listmle_loss_grad(
    w: np.ndarray,
    b: float,
    x: sp.spmatrix,
    list_shape: tuple[int, int],
) -> tuple[float, np.ndarray, float]:
    """``x`` rows are the list items flattened row-major, each list in true order."""
    m, k = list_shape
    scores = np.asarray(x @ w + b).reshape(m, k)
    s = scores - scores.max(axis=1, keepdims=True)
    lse = np.logaddexp.accumulate(s[:, ::-1], axis=1)[:, ::-1]
    loss = float((lse - s).sum()) / m
    # d/ds_j = -1 + sum_{i <= j} exp(s_j - lse_i)
    tri = np.tril(np.ones((k, k)))
    contrib = np.exp(s[:, :, None] - lse[:, None, :]) * tri[None, :, :]
    g = (contrib.sum(axis=2) - 1.0) / m
    return loss, np.asarray(x.T @ g.ravel()).ravel(), float(g.sum())
