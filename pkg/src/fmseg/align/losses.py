"""Contrastive alignment losses with exact analytic gradients.

The combined loss treats each frozen text feature as its class's
prototype and builds two pair families: patch-text pairs (prototype term)
and patch-patch pairs (a patch-level supervised-contrastive term). Both
ablation variants (patch-only SupCon over the pooled patch+text set, and
the prototype term alone) share the same batch contract. Gradients are
taken w.r.t. the aligned patch features only; prototypes stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossBatch:
    """Unit-norm aligned patch features with labels and class prototypes.

    Unlabeled patches must be excluded before batching; every label is a
    valid prototype row index.
    """

    z: np.ndarray  # M x D, unit rows
    labels: np.ndarray  # M, ints in [0, K)
    prototypes: np.ndarray  # K x D, unit rows

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.z.ndim != 2 or self.z.shape[0] == 0:
            raise ValueError("empty batch")
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] == 0:
            raise ValueError("need at least one prototype")
        if self.labels.shape != (self.z.shape[0],):
            raise ValueError("labels must be one per patch")
        if self.labels.min() < 0 or self.labels.max() >= self.prototypes.shape[0]:
            raise ValueError("label outside [0, num_classes)")


def _pair_terms(batch: LossBatch, temperature: float):
    z, t = batch.z, batch.prototypes
    m = z.shape[0]
    s = (z @ t.T) / temperature  # patch-text sims
    p = (z @ z.T) / temperature  # patch-patch sims
    exp_s = np.exp(s)
    exp_p = np.exp(p)
    np.fill_diagonal(exp_p, 0.0)  # j != i everywhere
    return m, s, p, exp_s, exp_p


def _text_term(batch: LossBatch, m, s, exp_s, exp_p):
    """Prototype term and its dS/dP contributions (unnormalized)."""
    labels = batch.labels
    n_k = np.bincount(labels, minlength=batch.prototypes.shape[0])
    w = 1.0 / n_k[labels]  # per-patch weight 1/N_{y_i}
    denom = exp_s.sum(axis=1) + exp_p.sum(axis=1)
    pos = s[np.arange(m), labels]
    total = float(np.sum(w * (-pos + np.log(denom))))

    ds = (w / denom)[:, None] * exp_s
    ds[np.arange(m), labels] -= w
    dp = (w / denom)[:, None] * exp_p
    return total, ds, dp


def _image_term(batch: LossBatch, m, p, exp_p):
    """Patch-patch term and its dP contribution (unnormalized).

    Positives exclude self; patches whose class has no other member
    contribute zero.
    """
    labels = batch.labels
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    n_pos = same.sum(axis=1)
    active = n_pos > 0
    if not active.any():
        return 0.0, np.zeros_like(p)

    row_denom = exp_p.sum(axis=1)
    pos_sum = np.where(same, p, 0.0).sum(axis=1)
    inv = np.zeros(m)
    inv[active] = 1.0 / n_pos[active]
    total = float(np.sum(-inv * pos_sum) + np.sum(np.log(row_denom[active])))

    dp = np.where(same, -inv[:, None], 0.0)
    dp[active] += exp_p[active] / row_denom[active, None]
    dp[~active] = 0.0
    return total, dp


def _combine(batch: LossBatch, temperature, total, ds, dp, scale):
    loss = total * scale
    dz = np.zeros_like(batch.z)
    if ds is not None:
        dz += ds @ batch.prototypes
    if dp is not None:
        dz += dp @ batch.z + dp.T @ batch.z
    dz *= scale / temperature
    return loss, dz


def tsupcon_loss(batch: LossBatch, temperature: float = 1.0):
    """Combined patch-text + patch-patch loss, normalized by (B*N + K).

    B*N counts the labeled patches actually present in the batch.
    Returns (scalar loss, dLoss/dZ).
    """
    m, s, p, exp_s, exp_p = _pair_terms(batch, temperature)
    t_total, ds, dp_t = _text_term(batch, m, s, exp_s, exp_p)
    im_total, dp_im = _image_term(batch, m, p, exp_p)
    scale = 1.0 / (m + batch.prototypes.shape[0])
    return _combine(batch, temperature, t_total + im_total, ds, dp_t + dp_im, scale)


def prototype_loss(batch: LossBatch, temperature: float = 1.0):
    """The patch-text term alone, normalized exactly as the combined loss."""
    m, s, p, exp_s, exp_p = _pair_terms(batch, temperature)
    t_total, ds, dp = _text_term(batch, m, s, exp_s, exp_p)
    scale = 1.0 / (m + batch.prototypes.shape[0])
    return _combine(batch, temperature, t_total, ds, dp, scale)


def supcon_loss(batch: LossBatch, temperature: float = 1.0):
    """Supervised contrastive loss over the pooled set {patches} + {prototypes}.

    Each prototype acts as an extra member of its class. Anchors without
    any positive contribute zero; gradients only flow to the patches.
    """
    m = batch.z.shape[0]
    k = batch.prototypes.shape[0]
    u = np.vstack([batch.z, batch.prototypes])
    labels = np.concatenate([batch.labels, np.arange(k)])
    q = (u @ u.T) / temperature
    exp_q = np.exp(q)
    np.fill_diagonal(exp_q, 0.0)

    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    n_pos = same.sum(axis=1)
    active = n_pos > 0
    denom = exp_q.sum(axis=1)

    inv = np.zeros(m + k)
    inv[active] = 1.0 / n_pos[active]
    pos_sum = np.where(same, q, 0.0).sum(axis=1)
    total = float(np.sum(-inv * pos_sum) + np.sum(np.log(denom[active])))

    dq = np.where(same, -inv[:, None], 0.0)
    dq[active] += exp_q[active] / denom[active, None]
    dq[~active] = 0.0

    scale = 1.0 / (m + k)
    du = dq @ u + dq.T @ u
    return total * scale, du[:m] * (scale / temperature)


LOSSES = {"tsupcon": tsupcon_loss, "supcon": supcon_loss, "prototype": prototype_loss}
