"""Training losses and their weighted combination.

Four cross-entropy terms: pair alignment over seen compositions
(l_sp), attribute and object marginals (l_att, l_obj), and retrieval
alignment (l_ret). The total is
l_ret + lambda_att_obj * (l_att + l_obj) + lambda_sp * l_sp,
each term batch-mean over the samples in the step.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

from . import numcore as nc
from .errors import ConfigError, NonFiniteError


@dataclass(frozen=True)
class LossWeights:
    lambda_att_obj: float = 1.0
    lambda_sp: float = 1.0

    def __post_init__(self):
        for name in ("lambda_att_obj", "lambda_sp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    l_att: float
    l_obj: float
    l_sp: float
    l_ret: float
    l_total: float

    def check(self, weights: LossWeights, tol: float = 1e-10) -> None:
        want = (self.l_ret + weights.lambda_att_obj * (self.l_att + self.l_obj)
                + weights.lambda_sp * self.l_sp)
        if abs(self.l_total - want) > tol:
            raise NonFiniteError(
                f"loss bookkeeping drift: total {self.l_total} vs recombined {want}")


def batch_cross_entropy(logit_vecs: Sequence[nc.Value],
                        targets: Sequence[int]) -> nc.Value:
    """Mean cross entropy over per-sample logit vectors."""
    if len(logit_vecs) != len(targets) or not logit_vecs:
        raise ConfigError("need one target per logit vector, at least one sample")
    return nc.mean_of([nc.cross_entropy_from_logits(lv, t)
                       for lv, t in zip(logit_vecs, targets)])


def loss_primitive(logit_vecs: Sequence[nc.Value], targets: Sequence[int]) -> nc.Value:
    """Attribute or object marginal loss (the two are symmetric)."""
    return batch_cross_entropy(logit_vecs, targets)


def loss_sp(seen_pair_logits: Sequence[nc.Value], target_seen_idx: Sequence[int],
            n_seen: int) -> nc.Value:
    """Pair alignment loss; logits and targets index the seen-pair list."""
    for t in target_seen_idx:
        if not 0 <= t < n_seen:
            raise ConfigError(f"target {t} is not a seen-pair index (|seen|={n_seen})")
    return batch_cross_entropy(seen_pair_logits, target_seen_idx)


def loss_ret(retrieval_logit_vecs: Sequence[nc.Value],
             target_seen_idx: Sequence[int], n_seen: int) -> nc.Value:
    """Retrieval alignment loss, same form as loss_sp over its logits."""
    return loss_sp(retrieval_logit_vecs, target_seen_idx, n_seen)


def loss_total(l_ret: nc.Value, l_att: nc.Value, l_obj: nc.Value, l_sp: nc.Value,
               weights: LossWeights) -> nc.Value:
    return nc.add(nc.add(l_ret, nc.scale(nc.add(l_att, l_obj), weights.lambda_att_obj)),
                  nc.scale(l_sp, weights.lambda_sp))


def report_from(l_att: nc.Value, l_obj: nc.Value, l_sp: nc.Value, l_ret: nc.Value,
                l_total: nc.Value, weights: LossWeights) -> LossReport:
    rep = LossReport(l_att=l_att.item(), l_obj=l_obj.item(), l_sp=l_sp.item(),
                     l_ret=l_ret.item(), l_total=l_total.item())
    rep.check(weights)
    return rep
