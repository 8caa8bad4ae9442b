"""Visual prompt repository: learnable (key, prompt) pairs with
cosine-similarity retrieval.

Keys are queried with the image feature f_v; the top-N prompts by
cosine score are pooled into a single retrieved representation f_ret.
Keys score, prompts feed downstream; the two roles never swap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError

_TAG_KEYS = 301
_TAG_PROMPTS = 302
INIT_STD = 0.02


@dataclass
class PromptRepository:
    keys: nc.Value     # (M, d)
    prompts: nc.Value  # (M, l, d)
    n_select: int

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompts.shape[1]


@dataclass
class RetrievalResult:
    indices: np.ndarray  # (n_select,) distinct repository indices
    scores: nc.Value     # (n_select,) cosine scores, descending
    f_ret: nc.Value      # (d,)


def init_repository(m: int, l: int, d: int, n_select: int = 2,
                    seed: int = 0) -> PromptRepository:
    if m < 2:
        raise ConfigError(f"repository size must be >= 2, got {m}")
    if l < 1 or d < 1:
        raise ConfigError(f"prompt length and width must be positive, got l={l} d={d}")
    if not 1 <= n_select <= m:
        raise ConfigError(f"n_select must be in [1, {m}], got {n_select}")
    keys = np.random.default_rng(np.random.SeedSequence([seed, _TAG_KEYS])).normal(
        0.0, INIT_STD, (m, d))
    prompts = np.random.default_rng(np.random.SeedSequence([seed, _TAG_PROMPTS])).normal(
        0.0, INIT_STD, (m, l, d))
    return PromptRepository(keys=nc.param(keys), prompts=nc.param(prompts),
                            n_select=n_select)


def top_n_indices(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest scores, ties broken by lower index."""
    # stable sort on -scores keeps original order among equals
    return np.argsort(-scores, kind="stable")[:n]


def aggregate(prompts: nc.Value, weights: nc.Value | None = None) -> nc.Value:
    """Pool selected prompts (n, l, d) into f_ret in R^d.

    Default is the plain mean over prompts and rows. With ``weights``
    (a length-n vector) the per-prompt row-means are combined by those
    weights instead; uniform weights reduce to the plain mean exactly.
    """
    if prompts.data.ndim != 3:
        raise ShapeError("aggregate expects a (n, l, d) prompt stack")
    if prompts.shape[0] == 0:
        raise ShapeError("aggregate of an empty selection")
    row_pooled = nc.mean_axis(prompts, 1)  # (n, d)
    if weights is None:
        return nc.mean_axis(row_pooled, 0)
    if weights.shape != (prompts.shape[0],):
        raise ShapeError(f"weights shape {weights.shape} != ({prompts.shape[0]},)")
    return nc.matmul(weights, row_pooled)


def retrieve(repo: PromptRepository, f_v: nc.Value) -> RetrievalResult:
    """Top-N prompts by key cosine score against f_v.

    Selection is hard (argsort of scores, lower index wins ties); the
    selected scores stay in the graph and weight the pooled prompts, so
    the selected keys receive gradients while unselected keys and
    prompts get none. Equal selected scores collapse to the uniform
    mean, and the whole result is invariant to positive rescaling of
    f_v.
    """
    if f_v.shape != (repo.keys.shape[1],):
        raise ShapeError(f"query shape {f_v.shape} != ({repo.keys.shape[1]},)")
    scores = nc.cosine_rows(repo.keys, f_v)  # raises on zero-norm key/query
    idx = top_n_indices(scores.data, repo.n_select)
    sel_scores = nc.take_rows(scores, idx)
    sel_prompts = nc.take_rows(repo.prompts, idx)
    weights = nc.softmax(sel_scores)
    f_ret = aggregate(sel_prompts, weights)
    return RetrievalResult(indices=idx, scores=sel_scores, f_ret=f_ret)
