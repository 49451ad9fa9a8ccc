"""Objective terms: BPR, Gaussian KL, InfoNCE and the contrastive regularizers.

All batch-level functions take embedding tables whose rows are addressed by
the ids stored in the batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .errors import ConfigError
from .graphdata import TrainBatch

log = logging.getLogger(__name__)

REDUCTIONS = ("mean", "sum")


@dataclass
class LossReport:
    bpr: float = 0.0
    kl: float = 0.0
    gcr_inter: float = 0.0
    gcr_intent: float = 0.0
    l2: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def average(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        keys = cls().as_dict().keys()
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def _reduce(x: dc.Var, reduction: str) -> dc.Var:
    if reduction == "mean":
        return dc.mean(x)
    if reduction == "sum":
        return dc.total_sum(x)
    raise ConfigError(f"unknown reduction {reduction!r}")


def _zero(tape: dc.Tape) -> dc.Var:
    return tape.const(0.0)


def bpr_loss(batch: TrainBatch, e_users: dc.Var, e_items: dc.Var, score: str = "logit") -> dc.Var:
    """Mean of -log sigmoid(s_ui - s_uj) over the triples.

    ``score="logit"`` uses raw inner products; ``score="prob"`` first maps
    them through the sigmoid edge probability.
    """
    eu = dc.take_rows(e_users, batch.users)
    pos = dc.row_sum(dc.mul(eu, dc.take_rows(e_items, batch.pos)))
    neg = dc.row_sum(dc.mul(eu, dc.take_rows(e_items, batch.neg)))
    if score == "prob":
        pos, neg = dc.sigmoid(pos), dc.sigmoid(neg)
    elif score != "logit":
        raise ConfigError(f"unknown bpr score {score!r}")
    return dc.scale(dc.mean(dc.log_sigmoid(pos - neg)), -1.0)


def kl_loss(e_mu, e_sigma, eps: float = dc.EPS_LOG) -> dc.Var:
    """KL(N(mu, diag(sigma^2)) || N(0, I)) averaged over nodes.

    Accepts a single (mu, sigma) block or matching sequences of blocks.
    """
    mus = list(e_mu) if isinstance(e_mu, (list, tuple)) else [e_mu]
    sigmas = list(e_sigma) if isinstance(e_sigma, (list, tuple)) else [e_sigma]
    if len(mus) != len(sigmas):
        raise ConfigError("kl_loss: mismatched block counts")
    total, nodes = None, 0
    for mu, sg in zip(mus, sigmas):
        if mu.shape != sg.shape:
            raise ConfigError(f"kl_loss: {mu.shape} vs {sg.shape}")
        var = dc.square(sg)
        part = dc.total_sum(dc.square(mu) + var - dc.log_eps(var, eps)) - float(mu.value.size)
        total = part if total is None else total + part
        nodes += mu.shape[0]
    if not nodes:
        return _zero(mus[0].tape)
    return dc.scale(total, 0.5 / nodes)


def contrast(logits: dc.Var, pos_cols, reduction: str = "mean") -> dc.Var:
    """Cross-entropy of the positive column against the whole row."""
    return _reduce(dc.logsumexp_rows(logits) - dc.pick(logits, pos_cols), reduction)


def info_nce(anchors: dc.Var, positives: dc.Var, negatives: dc.Var | None, tau: float,
             reduction: str = "mean") -> dc.Var:
    """InfoNCE with cosine similarity; the denominator holds the positive too."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if negatives is None or negatives.shape[0] == 0:
        log.warning("info_nce called with no negatives; returning 0")
        return _zero(anchors.tape)
    pos = dc.scale(dc.paired_cosine(anchors, positives), 1.0 / tau)
    neg = dc.scale(dc.row_cosine(anchors, negatives), 1.0 / tau)
    return contrast(dc.hstack(pos, neg), np.zeros(anchors.shape[0], dtype=np.int64), reduction)


def self_contrast(x: dc.Var, tau: float, reduction: str = "mean") -> dc.Var:
    """Each row is its own positive; every other row is a negative."""
    return _reduce(dc.cosine_xent_rows(x, x, np.arange(x.shape[0]), tau), reduction)


def interaction_regularizer(batch: TrainBatch, e_users: dc.Var, e_items: dc.Var, tau: float,
                            reduction: str = "mean") -> dc.Var:
    """User-to-item alignment; other batch items act as negatives."""
    anchors = dc.take_rows(e_users, batch.users)
    cands = dc.take_rows(e_items, batch.reg_items)
    cols = np.searchsorted(batch.reg_items, batch.pos)
    return _reduce(dc.cosine_xent_rows(anchors, cands, cols, tau), reduction)


def homogeneous_regularizer(batch: TrainBatch, e_users: dc.Var, e_items: dc.Var, tau: float,
                            reduction: str = "mean") -> dc.Var:
    """Uniformity among distinct batch users plus among distinct batch items."""
    return (self_contrast(dc.take_rows(e_users, batch.reg_users), tau, reduction)
            + self_contrast(dc.take_rows(e_items, batch.reg_items), tau, reduction))


def gcr_interaction(batch: TrainBatch, e_users: dc.Var, e_items: dc.Var, tau: float,
                    ir: bool = True, hnr: bool = True, reduction: str = "mean") -> dc.Var:
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    out = _zero(e_users.tape)
    if ir:
        out = out + interaction_regularizer(batch, e_users, e_items, tau, reduction)
    if hnr:
        out = out + homogeneous_regularizer(batch, e_users, e_items, tau, reduction)
    return out


def gcr_intent(sigma_users: dc.Var, sigma_items: dc.Var, tau: float,
               reduction: str = "mean") -> dc.Var:
    """Self-contrast of individual intent vectors on both sides (rows already deduplicated)."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return self_contrast(sigma_users, tau, reduction) + self_contrast(sigma_items, tau, reduction)


def l2_penalty(blocks: list[dc.Var], batch_size: int) -> dc.Var:
    """Squared Frobenius norm of the given parameter blocks over the batch size."""
    total = None
    for b in blocks:
        s = dc.total_sum(dc.square(b))
        total = s if total is None else total + s
    return dc.scale(total, 1.0 / batch_size)


def total_loss(bpr: dc.Var, kl: dc.Var | None = None, gcr_inter: dc.Var | None = None,
               gcr_intent: dc.Var | None = None, l2: dc.Var | None = None,
               lambda1: float = 0.0, lambda2: float = 0.0,
               kl_weight: float = 1.0) -> tuple[dc.Var, LossReport]:
    """bpr + kl_weight*kl + lambda1*(gcr_inter + gcr_intent) + lambda2*l2.

    Terms passed as None are structurally absent and reported as 0.
    """
    if lambda1 < 0 or lambda2 < 0 or kl_weight < 0:
        raise ConfigError("loss weights must be nonnegative")
    total = bpr
    if kl is not None:
        total = total + dc.scale(kl, kl_weight)
    gcr = None
    if gcr_inter is not None and gcr_intent is not None:
        gcr = gcr_inter + gcr_intent
    else:
        gcr = gcr_inter if gcr_inter is not None else gcr_intent
    if gcr is not None:
        total = total + dc.scale(gcr, lambda1)
    if l2 is not None:
        total = total + dc.scale(l2, lambda2)

    def val(x):
        return 0.0 if x is None else x.item()

    report = LossReport(bpr=val(bpr), kl=val(kl), gcr_inter=val(gcr_inter),
                        gcr_intent=val(gcr_intent), l2=val(l2), total=val(total))
    return total, report
