"""Contrastive term tying clean and perturbed representations, with in-batch negatives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


def cosine_similarity(u, v) -> Tensor:
    return ad.cosine_similarity(ad.as_tensor(u), ad.as_tensor(v))


@dataclass
class ContrastiveInstance:
    anchor: Tensor
    positive: Tensor
    negatives: Tensor
    temperature: float = 0.07

    def __post_init__(self):
        if self.negatives.ndim != 2 or self.negatives.shape[0] < 1:
            raise ValueError("need at least one negative, shaped (n, d)")


@dataclass
class NegativeSample:
    """Flat indices into the (B*N) representation grid, padded with -1 where an anchor ran short."""

    indices: np.ndarray
    mask: np.ndarray
    short: int

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def sample_negatives(rep_pad_mask: np.ndarray, anchors: np.ndarray, n: int, rng: np.random.Generator) -> NegativeSample:
    """Uniformly sample ``n`` unpadded positions per anchor, never the anchor itself.

    ``anchors`` is a (K, 2) array of (sentence, position).  Anchors whose pool
    holds fewer than ``n`` positions get all of them and are counted in ``short``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    width = rep_pad_mask.shape[1]
    pool = np.flatnonzero(~rep_pad_mask.reshape(-1))
    indices = np.full((len(anchors), n), -1, dtype=np.int64)
    mask = np.zeros((len(anchors), n), dtype=bool)
    short = 0
    for a, (k, j) in enumerate(anchors):
        choices = pool[pool != k * width + j]
        if choices.size == 0:
            raise ValueError("no unpadded non-anchor position is available for negatives")
        take = min(n, choices.size)
        if take < n:
            short += 1
        indices[a, :take] = rng.choice(choices, size=take, replace=False)
        mask[a, :take] = True
    if short:
        log.warning("%d anchor(s) had fewer than %d negatives available", short, n)
    return NegativeSample(indices, mask, short)


def batched_contrastive_loss(anchors: Tensor, positives: Tensor, negatives: Tensor, temperature: float,
                             negative_mask: np.ndarray | None = None, include_positive: bool = False) -> Tensor:
    """Per-anchor losses, shape (K,).

    ``-cos(a, p)/tau + log sum_n exp(cos(a, n)/tau)``; with ``include_positive``
    the positive also enters the denominator (bounded-below InfoNCE).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    pos = ad.cosine_similarity(anchors, positives) * (1.0 / temperature)
    k, n = negatives.shape[:2]
    neg = ad.cosine_similarity(anchors.reshape(k, 1, anchors.shape[-1]), negatives) * (1.0 / temperature)
    mask = np.ones((k, n), dtype=bool) if negative_mask is None else negative_mask
    if include_positive:
        neg = ad.concat([pos.reshape(k, 1), neg], axis=1)
        mask = np.concatenate([np.ones((k, 1), dtype=bool), mask], axis=1)
    return ad.logsumexp(neg, axis=1, mask=mask) - pos


def contrastive_loss(instances: list[ContrastiveInstance], include_positive: bool = False,
                     reduction: str = "sum") -> Tensor:
    """Loss over a list of instances, summed (default) or averaged over anchors."""
    if not instances:
        raise ValueError("contrastive_loss needs at least one instance")
    taus = {inst.temperature for inst in instances}
    if len(taus) != 1:
        raise ValueError("all instances must share one temperature")
    tau = taus.pop()
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = max(inst.negatives.shape[0] for inst in instances)
    d = instances[0].anchor.shape[-1]
    negs, mask = [], np.zeros((len(instances), n), dtype=bool)
    for i, inst in enumerate(instances):
        m = inst.negatives.shape[0]
        mask[i, :m] = True
        padded = inst.negatives if m == n else ad.concat([inst.negatives, Tensor(np.ones((n - m, d)))], axis=0)
        negs.append(padded)
    per_anchor = batched_contrastive_loss(
        ad.stack([inst.anchor for inst in instances]),
        ad.stack([inst.positive for inst in instances]),
        ad.stack(negs),
        tau,
        mask,
        include_positive,
    )
    return reduce_losses(per_anchor, reduction)


def reduce_losses(per_anchor: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
