"""Supervised contrastive loss (two normalizations) and cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


# same clamp as torch.nn.functional.normalize, so a dead (all-zero) embedding is not fatal
NORM_EPS = 1e-12


class NoPositivePairsError(ValueError):
    pass


@dataclass(frozen=True)
class PositiveMask:
    mask: np.ndarray  # labels[i] == labels[j], diagonal included
    anchor_mask: np.ndarray  # i != j

    @property
    def positives(self) -> np.ndarray:
        return self.mask & self.anchor_mask

    def sizes(self) -> np.ndarray:
        """|P(i)| for every anchor i."""
        return self.positives.sum(axis=1)


def build_positive_mask(labels) -> PositiveMask:
    labels = np.asarray(labels).reshape(-1)
    if labels.size < 2:
        raise ValueError(f"contrastive batch needs at least 2 samples, got {labels.size}")
    mask = labels[:, None] == labels[None, :]
    anchor = ~np.eye(labels.size, dtype=bool)
    return PositiveMask(mask, anchor)


def _logits(z, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = ad.as_tensor(z)
    if z.data.ndim != 2:
        z = ad.reshape(z, (z.shape[0], -1))
    zn = ad.l2_normalize(z, eps=NORM_EPS)
    return ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)


def _log_prob(logits: Tensor, anchor_mask: np.ndarray) -> Tensor:
    # log softmax over j != i; log_sum_exp subtracts the row max internally
    lse = ad.log_sum_exp(logits, axis=1, keepdims=True, where=anchor_mask)
    return ad.sub(logits, lse)


def supcon_terms(z, labels, tau: float = 0.1) -> tuple[Tensor, np.ndarray]:
    """Per-anchor terms of the loss and the boolean 'anchor has positives' vector.

    Term i is ``-(1/|P(i)|) * sum_{p in P(i)} log softmax_{j != i}(z_i . z_j / tau)[p]``
    on row-normalized ``z``; anchors with empty P(i) get 0.
    """
    pm = build_positive_mask(labels)
    if z.shape[0] != pm.mask.shape[0]:
        raise ad.ShapeError(f"{z.shape[0]} embeddings but {pm.mask.shape[0]} labels")
    sizes = pm.sizes()
    has = sizes > 0
    if not has.any():
        raise NoPositivePairsError("no positive pairs in batch")
    logits = _logits(z, tau)
    log_prob = _log_prob(logits, pm.anchor_mask)
    weights = np.where(has[:, None], pm.positives / np.maximum(sizes, 1)[:, None], 0.0)
    terms = ad.neg(ad.sum(ad.mul(log_prob, weights), axis=1))
    return terms, has


def supcon_loss(z, labels, tau: float = 0.1) -> Tensor:
    """Sum over anchors of the per-anchor supervised contrastive term.

    ``z`` holds raw projection-head outputs; rows are L2-normalized here.
    """
    terms, _ = supcon_terms(z, labels, tau)
    return ad.sum(terms)


def supcon_loss_alg1(z, labels, tau: float = 0.1) -> Tensor:
    """Reference-pseudocode normalization of the same contrastive objective.

    Each anchor's positive log-probabilities are summed, divided by the total
    count of equal-label pairs *including* the diagonal, then averaged over the
    batch. Differs from :func:`supcon_loss` except in degenerate cases.
    """
    pm = build_positive_mask(labels)
    if z.shape[0] != pm.mask.shape[0]:
        raise ad.ShapeError(f"{z.shape[0]} embeddings but {pm.mask.shape[0]} labels")
    if not pm.positives.any():
        raise NoPositivePairsError("no positive pairs in batch")
    b = pm.mask.shape[0]
    logits = _logits(z, tau)
    log_prob = _log_prob(logits, pm.anchor_mask)
    weights = pm.positives.astype(np.float64) / pm.mask.sum()
    per_anchor = ad.neg(ad.sum(ad.mul(log_prob, weights), axis=1))
    return ad.scale(ad.sum(per_anchor), 1.0 / b)


def cross_entropy(logits, labels) -> Tensor:
    """Summed (not averaged) softmax cross-entropy over the batch."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.size:
        raise ad.ShapeError(f"cross_entropy: logits {logits.shape} vs {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels outside [0, {logits.shape[1]})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    log_probs = ad.sub(logits, ad.log_sum_exp(logits, axis=1, keepdims=True))
    return ad.neg(ad.sum(ad.mul(log_probs, onehot)))
