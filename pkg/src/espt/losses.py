"""Ridge-reconstruction few-shot classifier and the spatial-consistency objective.

Classification scores a query against a class by reconstructing each of
its local feature vectors from the class's pooled support features with
ridge regression; the logit is the negative mean squared reconstruction
residual. The self-supervised objective asks the reconstruction
coefficients of a query to agree (in cosine similarity) between the
original episode and its rotated counterpart, with a stop gradient on the
original-branch coefficients.

All per-class systems share one factorization: the Gram matrix depends
only on the class, so a single solve covers every query location in the
episode.
"""

from __future__ import annotations

import numpy as np

from espt import tensor as T
from espt.tensor import Tensor, as_tensor, solve_spd, stop_grad

COSINE_EPS = 1e-12


def effective_lambda(k, h, w, d, lam_bar):
    """Ridge strength scaled by the support-rows to feature-dim ratio."""
    if min(k, h, w, d) <= 0 or lam_bar <= 0:
        raise ValueError("effective_lambda needs positive arguments")
    return (k * h * w / d) * lam_bar


def class_matrix(support_feats, support_labels, class_index):
    """Stack a class's k support feature maps into a (k*h*w, d) matrix.

    Rows are ordered (support index, row-major spatial location), so the
    layout is deterministic.
    """
    support_feats = as_tensor(support_feats)
    _, h, w, d = support_feats.shape
    idx = np.flatnonzero(np.asarray(support_labels) == class_index)
    if idx.size == 0:
        raise ValueError(f"no support samples with label {class_index}")
    return T.take(support_feats, idx).reshape(idx.size * h * w, d)


def _ridge_solve(x_c, q_flat, lam_bar):
    """Coefficients for all rows of q_flat against one class matrix.

    Returns (coeffs, recon): coeffs is (rows, khw), recon is (rows, d).
    """
    khw, d = x_c.shape
    lam = (khw / d) * lam_bar
    gram = x_c @ x_c.transpose(1, 0) + Tensor(
        lam * np.eye(khw, dtype=x_c.data.dtype))
    rhs = x_c @ q_flat.transpose(1, 0)            # (khw, rows)
    coeffs = solve_spd(gram, rhs).transpose(1, 0)  # (rows, khw)
    recon = coeffs @ x_c                           # (rows, d)
    return coeffs, recon


def ridge_coefficients(x_c, f_q, lam_bar):
    """Reconstruction coefficients of one query against one class.

    ``x_c`` is (k*h*w, d); ``f_q`` is an (h, w, d) feature map (or already
    flattened to (h*w, d)). Returns an (h*w, k*h*w) tensor, one coefficient
    vector per query location, differentiable w.r.t. both inputs.
    """
    x_c, f_q = as_tensor(x_c), as_tensor(f_q)
    if lam_bar <= 0:
        raise ValueError(f"lam_bar must be positive, got {lam_bar}")
    if f_q.ndim == 3:
        h, w, d = f_q.shape
        f_q = f_q.reshape(h * w, d)
    if x_c.shape[1] != f_q.shape[1]:
        raise ValueError(
            f"feature dim mismatch: class matrix d={x_c.shape[1]}, "
            f"query d={f_q.shape[1]}"
        )
    coeffs, _ = _ridge_solve(x_c, f_q, lam_bar)
    return coeffs


def class_logit(f_q, x_c, coeffs):
    """Negative mean squared reconstruction residual over all locations."""
    f_q = as_tensor(f_q)
    if f_q.ndim == 3:
        h, w, d = f_q.shape
        f_q = f_q.reshape(h * w, d)
    hw = f_q.shape[0]
    resid = f_q - coeffs @ as_tensor(x_c)
    return -(resid * resid).sum() / hw


def reconstruct_episode(support_feats, support_labels, query_feats, n, lam_bar):
    """Per-class ridge reconstructions for every query in an episode.

    Returns ``(logits, coeffs)`` where logits is (n_query, n) and coeffs is
    (n_query, n, h*w, k*h*w). One SPD solve per class covers all queries.
    """
    support_feats = as_tensor(support_feats)
    query_feats = as_tensor(query_feats)
    nq, h, w, d = query_feats.shape
    hw = h * w
    q_flat = query_feats.reshape(nq * hw, d)
    logit_cols, coeff_cols = [], []
    for c in range(n):
        x_c = class_matrix(support_feats, support_labels, c)
        coeffs, recon = _ridge_solve(x_c, q_flat, lam_bar)
        resid = q_flat - recon
        sq = (resid * resid).sum(axis=1).reshape(nq, hw)
        logit_cols.append(-sq.mean(axis=1))
        coeff_cols.append(coeffs.reshape(nq, hw, x_c.shape[0]))
    logits = T.stack(logit_cols, axis=1)
    coeffs = T.stack(coeff_cols, axis=1)
    return logits, coeffs


def log_softmax(z):
    """Row-wise log softmax with max subtraction (the shift is a constant)."""
    z = as_tensor(z)
    shift = z.data.max(axis=-1, keepdims=True)
    centered = z - Tensor(shift)
    return centered - centered.exp().sum(axis=-1, keepdims=True).log()


def predict_proba(logits, gamma):
    """Softmax of temperature-scaled logits; rows sum to one."""
    return log_softmax(as_tensor(logits) * gamma).exp()


def classification_loss(support_feats, support_labels, query_feats, query_labels,
                        gamma, lam_bar):
    """Mean cross-entropy of the queries under the reconstruction classifier.

    Returns ``(loss, logits)``; the logits are reused for accuracy metrics.
    """
    query_labels = np.asarray(query_labels)
    n = int(np.asarray(support_labels).max()) + 1
    logits, _ = reconstruct_episode(
        support_feats, support_labels, query_feats, n, lam_bar)
    return cross_entropy_from_logits(logits, query_labels, gamma), logits


def cross_entropy_from_logits(logits, labels, gamma):
    labels = np.asarray(labels)
    nq, n = logits.shape
    logp = log_softmax(as_tensor(logits) * gamma)
    onehot = np.zeros((nq, n), dtype=logits.data.dtype)
    onehot[np.arange(nq), labels] = 1.0
    return -(logp * Tensor(onehot)).sum() / nq


def _cosine_distance_sum(ref, other, class_axis):
    """1 - cosine per coefficient vector, summed over classes, meaned over
    locations (and any leading query axis). Norms are epsilon-guarded."""
    num = (ref * other).sum(axis=-1)
    ref_norm = (ref * ref).sum(axis=-1).sqrt()
    other_norm = (other * other).sum(axis=-1).sqrt()
    cosine = num / ((ref_norm + COSINE_EPS) * (other_norm + COSINE_EPS))
    per_location = (1.0 - cosine).sum(axis=class_axis)
    return per_location.mean(axis=-1)


def consistency_loss(w_orig, w_trans, stop_gradient=True):
    """Coefficient-consistency loss for one query.

    Both inputs are (n, h*w, k*h*w): coefficients for every class at every
    location. The original-branch side is gradient-stopped, so only the
    transformed branch receives gradients; ``stop_gradient=False`` exists to
    demonstrate what removing the barrier does.
    """
    w_orig, w_trans = as_tensor(w_orig), as_tensor(w_trans)
    if w_orig.shape != w_trans.shape:
        raise ValueError(
            f"coefficient shapes differ: {w_orig.shape} vs {w_trans.shape}")
    ref = stop_grad(w_orig) if stop_gradient else w_orig
    return _cosine_distance_sum(ref, w_trans, class_axis=0)


def pretext_loss(per_query_losses):
    """Arithmetic mean of the per-query consistency losses."""
    if not per_query_losses:
        raise ValueError("pretext_loss needs at least one query")
    return T.stack(list(per_query_losses)).mean()


def pretext_loss_batched(coeffs_orig, coeffs_trans, stop_gradient=True):
    """Vectorized pretext objective over (n_query, n, h*w, k*h*w) stacks.

    Equal to averaging :func:`consistency_loss` over the queries.
    """
    coeffs_orig, coeffs_trans = as_tensor(coeffs_orig), as_tensor(coeffs_trans)
    if coeffs_orig.shape != coeffs_trans.shape:
        raise ValueError(
            f"coefficient shapes differ: {coeffs_orig.shape} vs {coeffs_trans.shape}")
    ref = stop_grad(coeffs_orig) if stop_gradient else coeffs_orig
    per_query = _cosine_distance_sum(ref, coeffs_trans, class_axis=1)
    return per_query.mean()


def total_loss(l_class, l_pretext, alpha):
    """Weighted sum of the classification and pretext objectives."""
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    return as_tensor(l_class) + alpha * as_tensor(l_pretext)
