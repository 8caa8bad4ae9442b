"""Seen/unseen evaluation protocol.

A trained pair classifier is biased toward seen compositions, so a
single accuracy number hides the trade-off. The sweep adds a scalar
bias to every unseen-pair logit, slides it from -inf to +inf, and
records seen/unseen accuracy at each breakpoint; the summary reports
best-seen (S), best-unseen (U), best harmonic mean (H), and the area
under the unseen-versus-seen curve (AUC). Open-world evaluation first
filters the candidate pairs by a feasibility score with threshold T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError


@dataclass
class EvalCurve:
    """Sweep points (bias, seen_acc, unseen_acc), sorted by bias.

    The first point is the bias = -inf sentinel (predictions restricted
    to seen pairs), the last is +inf (restricted to unseen pairs). Seen
    accuracy is non-increasing and unseen accuracy non-decreasing along
    the sweep; both follow from per-sample monotonicity, so the check
    here is exact, no tolerance.
    """

    points: list[tuple[float, float, float]]
    n_samples: int
    n_pairs: int
    n_seen_pairs: int

    def validate(self) -> None:
        if len(self.points) < 2:
            raise ShapeError("curve needs at least the two sentinel points")
        biases = [b for b, _, _ in self.points]
        if biases[0] != -math.inf or biases[-1] != math.inf:
            raise ShapeError("curve must start at -inf and end at +inf")
        if any(b2 <= b1 for b1, b2 in zip(biases, biases[1:])):
            raise ShapeError("biases must be strictly increasing")
        for (_, s1, u1), (_, s2, u2) in zip(self.points, self.points[1:]):
            if s2 > s1:
                raise ShapeError("seen accuracy must be non-increasing in bias")
            if u2 < u1:
                raise ShapeError("unseen accuracy must be non-decreasing in bias")


@dataclass(frozen=True)
class MetricsReport:
    """Headline numbers, all in [0, 1]."""

    s: float
    u: float
    h: float
    auc: float

    def __post_init__(self):
        for name in ("s", "u", "h", "auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ShapeError(f"{name} = {v} outside [0, 1]")

    def as_percent_dict(self) -> dict:
        return {"S": 100.0 * self.s, "U": 100.0 * self.u,
                "H": 100.0 * self.h, "AUC": 100.0 * self.auc}


def _masked_argmax_rows(m: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-row index of the maximum within mask; ties go to the lower index."""
    return np.argmax(np.where(mask[None, :], m, -np.inf), axis=1)


def bias_sweep(logits: np.ndarray, labels: np.ndarray, seen_mask: np.ndarray,
               feasible_mask: np.ndarray | None = None) -> EvalCurve:
    """Trace seen/unseen accuracy over every distinct unseen-logit bias.

    Candidate biases are the per-sample margins (best seen logit minus
    best unseen logit): between consecutive margins no argmax changes,
    so evaluating at the margins plus the two sentinels yields the exact
    curve. ``feasible_mask`` restricts candidate columns (open-world
    filtering); labels must index ``logits`` columns.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    n, c = logits.shape
    if labels.shape != (n,) or seen_mask.shape != (c,):
        raise ShapeError("labels must be (n,), seen_mask (n_pairs,)")
    if feasible_mask is None:
        feasible_mask = np.ones(c, dtype=bool)
    feasible_mask = np.asarray(feasible_mask, dtype=bool)

    seen_cols = seen_mask & feasible_mask
    unseen_cols = ~seen_mask & feasible_mask
    if not seen_cols.any():
        raise DegenerateInputError("no feasible seen-pair columns")
    if not unseen_cols.any():
        raise DegenerateInputError("no feasible unseen-pair columns")

    sample_is_seen = seen_mask[labels]
    n_seen_samples = int(sample_is_seen.sum())
    n_unseen_samples = n - n_seen_samples
    if n_seen_samples == 0:
        raise DegenerateInputError("no seen-labeled samples in the evaluation set")
    if n_unseen_samples == 0:
        raise DegenerateInputError("no unseen-labeled samples in the evaluation set")

    best_seen = logits[:, seen_cols].max(axis=1)
    best_unseen = logits[:, unseen_cols].max(axis=1)
    margins = best_seen - best_unseen

    def accs(preds: np.ndarray) -> tuple[float, float]:
        correct = preds == labels
        return (float(correct[sample_is_seen].sum()) / n_seen_samples,
                float(correct[~sample_is_seen].sum()) / n_unseen_samples)

    points: list[tuple[float, float, float]] = []
    # -inf: unseen pairs are unreachable
    s, u = accs(_masked_argmax_rows(logits, seen_cols))
    points.append((-math.inf, s, u))
    for b in np.unique(margins):
        adjusted = logits.copy()
        adjusted[:, unseen_cols] += b
        s, u = accs(_masked_argmax_rows(adjusted, feasible_mask))
        points.append((float(b), s, u))
    # +inf: seen pairs are unreachable
    s, u = accs(_masked_argmax_rows(logits, unseen_cols))
    points.append((math.inf, s, u))

    curve = EvalCurve(points=points, n_samples=n, n_pairs=c,
                      n_seen_pairs=int(seen_mask.sum()))
    curve.validate()
    return curve


def summarize(curve: EvalCurve) -> MetricsReport:
    """S/U from the sentinel ends, best H along the sweep, trapezoid AUC.

    AUC integrates unseen accuracy over seen accuracy from s = 0 up to
    s = S. Curves produced by bias_sweep always reach s = 0 at +inf; a
    hand-built curve that stops early is closed with a horizontal
    segment down to s = 0 at its final unseen accuracy.
    """
    curve.validate()
    s_best = curve.points[0][1]
    u_best = curve.points[-1][2]
    h = 0.0
    for _, s, u in curve.points:
        if s + u > 0.0:
            h = max(h, 2.0 * s * u / (s + u))
    auc = 0.0
    for (_, s1, u1), (_, s2, u2) in zip(curve.points, curve.points[1:]):
        auc += (s1 - s2) * 0.5 * (u1 + u2)
    s_last, u_last = curve.points[-1][1], curve.points[-1][2]
    if s_last > 0.0:
        auc += s_last * u_last
    return MetricsReport(s=s_best, u=u_best, h=h, auc=auc)


def _safe_unit_rows(table: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} embedding row")
    return table / norms


def feasibility_scores(attr_emb: np.ndarray, obj_emb: np.ndarray,
                       seen_pairs: list[tuple[int, int]],
                       pairs: list[tuple[int, int]]) -> np.ndarray:
    """Similarity-based feasibility per candidate pair.

    A seen pair scores 1. For an unseen pair (a, o): how close is o to
    the objects that attribute a was actually seen with (max cosine over
    object embeddings), and symmetrically for a; the score is the mean
    of the available sides. A pair whose primitives have no seen
    co-occurrences at all scores -1 (always filtered).
    """
    if not seen_pairs:
        raise DegenerateInputError("feasibility needs a nonempty seen-pair set")
    a_unit = _safe_unit_rows(np.asarray(attr_emb, float), "attribute")
    o_unit = _safe_unit_rows(np.asarray(obj_emb, float), "object")
    seen = set(seen_pairs)
    objs_with_attr: dict[int, list[int]] = {}
    attrs_with_obj: dict[int, list[int]] = {}
    for a, o in seen_pairs:
        objs_with_attr.setdefault(a, []).append(o)
        attrs_with_obj.setdefault(o, []).append(a)

    out = np.empty(len(pairs))
    for k, (a, o) in enumerate(pairs):
        if (a, o) in seen:
            out[k] = 1.0
            continue
        sides = []
        if a in objs_with_attr:
            cos_o = o_unit[objs_with_attr[a]] @ o_unit[o]
            sides.append(float(np.clip(cos_o, -1.0, 1.0).max()))
        if o in attrs_with_obj:
            cos_a = a_unit[attrs_with_obj[o]] @ a_unit[a]
            sides.append(float(np.clip(cos_a, -1.0, 1.0).max()))
        out[k] = float(np.mean(sides)) if sides else -1.0
    return out


def calibrate_threshold(val_logits: np.ndarray, val_labels: np.ndarray,
                        seen_mask: np.ndarray, feasibility: np.ndarray) -> float:
    """Pick the feasibility threshold maximizing validation H.

    Candidates are -inf (no filtering) plus every distinct unseen-pair
    feasibility value; filtering at a candidate keeps pairs scoring at
    or above it, so the feasible unseen set is never empty. Ties favor
    the smallest threshold (filter less when it does not help).
    """
    seen_mask = np.asarray(seen_mask, dtype=bool)
    feasibility = np.asarray(feasibility, dtype=np.float64)
    if feasibility.shape != seen_mask.shape:
        raise ShapeError("feasibility and seen_mask must align")
    unseen_vals = np.unique(feasibility[~seen_mask])
    if unseen_vals.size == 0:
        raise DegenerateInputError("no unseen pairs to calibrate over")
    best_t = -math.inf
    best_h = -1.0
    for t in [-math.inf] + [float(v) for v in unseen_vals]:
        feasible = seen_mask | (feasibility >= t)
        rep = summarize(bias_sweep(val_logits, val_labels, seen_mask, feasible))
        if rep.h > best_h:
            best_h, best_t = rep.h, t
    return best_t


def curve_rows(curve: EvalCurve) -> list[tuple[str, str, str]]:
    """CSV-ready rows (bias, seen_acc, unseen_acc) with inf spelled out."""
    rows = []
    for b, s, u in curve.points:
        bias = "-inf" if b == -math.inf else ("inf" if b == math.inf else repr(b))
        rows.append((bias, repr(s), repr(u)))
    return rows
