"""Pair-space scoring, primitive decomposition, and cross-attention
fusion.

Visual and text features are projected into a shared pair space and
scored by temperature-scaled cosine similarity. Pair logits decompose
into attribute/object marginals by group averaging. Cross-attention
with text-derived queries over the visual tokens produces the fused
representation that the retrieval loss scores against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DegenerateInputError, ShapeError

_TAG_PROJ_V = 601
_TAG_PROJ_T = 602
_TAG_PROJ_RET = 603
_TAG_PROJ_FUSE = 604
_TAG_W_Q = 611
_TAG_W_K = 612
_TAG_W_V = 613


@dataclass
class PairSpaceProjections:
    proj_v: nc.Value     # (d, d_p) visual
    proj_t: nc.Value     # (d, d_p) text
    proj_ret: nc.Value   # (d, d_p) retrieved prompts
    proj_fuse: nc.Value  # (d, d_p) fused features


@dataclass
class CrossAttentionBlock:
    w_q: nc.Value  # (d, d_a)
    w_k: nc.Value  # (d, d_a)
    w_v: nc.Value  # (d, d_a)

    @property
    def d_a(self) -> int:
        return self.w_q.shape[1]


def init_projections(d: int, d_p: int, seed: int = 0) -> PairSpaceProjections:
    if d < 1 or d_p < 1:
        raise ConfigError(f"projection dims must be positive, got d={d} d_p={d_p}")
    std = 1.0 / np.sqrt(d)
    mk = lambda tag: nc.param(np.random.default_rng(
        np.random.SeedSequence([seed, tag])).normal(0.0, std, (d, d_p)))
    return PairSpaceProjections(proj_v=mk(_TAG_PROJ_V), proj_t=mk(_TAG_PROJ_T),
                                proj_ret=mk(_TAG_PROJ_RET), proj_fuse=mk(_TAG_PROJ_FUSE))


def init_attention(d: int, d_a: int, seed: int = 0) -> CrossAttentionBlock:
    if d_a < 1:
        raise ConfigError(f"attention width must be positive, got {d_a}")
    std = 1.0 / np.sqrt(d)
    mk = lambda tag: nc.param(np.random.default_rng(
        np.random.SeedSequence([seed, tag])).normal(0.0, std, (d, d_a)))
    return CrossAttentionBlock(w_q=mk(_TAG_W_Q), w_k=mk(_TAG_W_K), w_v=mk(_TAG_W_V))


def _cosine_logits(vec: nc.Value, rows: nc.Value, proj_vec: nc.Value,
                   proj_rows: nc.Value, tau: nc.Value) -> nc.Value:
    pv = nc.normalize(nc.matmul(vec, proj_vec))
    pr = nc.normalize_rows(nc.matmul(rows, proj_rows))
    return nc.scale_by(nc.matmul(pr, pv), tau)


def pair_logits(f_v: nc.Value, f_t_rows: nc.Value, proj: PairSpaceProjections,
                tau: nc.Value) -> nc.Value:
    """Temperature-scaled cosine between projected f_v and each text row.

    Normalized dot products keep the temperature identifiable; any
    positive rescaling of f_v leaves the logits unchanged.
    """
    return _cosine_logits(f_v, f_t_rows, proj.proj_v, proj.proj_t, tau)


def retrieval_logits(f_ret: nc.Value, fused_rows: nc.Value,
                     proj: PairSpaceProjections, tau: nc.Value) -> nc.Value:
    """Same scoring as pair_logits, between f_ret and the fused rows."""
    return _cosine_logits(f_ret, fused_rows, proj.proj_ret, proj.proj_fuse, tau)


def group_average_matrices(pairs: list[tuple[int, int]], n_attrs: int,
                           n_objs: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant matrices that average pair logits per attribute/object.

    attr_mat[a, k] = 1/|pairs with attribute a| if pairs[k] has
    attribute a. Every primitive must be covered by at least one pair.
    """
    attr_mat = np.zeros((n_attrs, len(pairs)))
    obj_mat = np.zeros((n_objs, len(pairs)))
    for k, (a, o) in enumerate(pairs):
        attr_mat[a, k] = 1.0
        obj_mat[o, k] = 1.0
    a_counts = attr_mat.sum(axis=1)
    o_counts = obj_mat.sum(axis=1)
    if np.any(a_counts == 0):
        missing = np.flatnonzero(a_counts == 0).tolist()
        raise DegenerateInputError(f"attributes covered by no pair: {missing}")
    if np.any(o_counts == 0):
        missing = np.flatnonzero(o_counts == 0).tolist()
        raise DegenerateInputError(f"objects covered by no pair: {missing}")
    return attr_mat / a_counts[:, None], obj_mat / o_counts[:, None]


def decompose_attr_obj(pair_logit_vec: nc.Value, pairs: list[tuple[int, int]],
                       n_attrs: int, n_objs: int) -> tuple[nc.Value, nc.Value]:
    """Attribute and object marginal logits by group-averaging pair
    logits over pairs sharing the primitive."""
    if pair_logit_vec.shape != (len(pairs),):
        raise ShapeError(f"logit vector {pair_logit_vec.shape} != ({len(pairs)},)")
    attr_mat, obj_mat = group_average_matrices(pairs, n_attrs, n_objs)
    return (nc.matmul(nc.constant(attr_mat), pair_logit_vec),
            nc.matmul(nc.constant(obj_mat), pair_logit_vec))


def cross_attention(block: CrossAttentionBlock, f_t_rows: nc.Value,
                    tokens: nc.Value) -> nc.Value:
    """Single-head attention, queries from text, keys/values from visual
    tokens, residual added back onto the text rows.

    Requires d_a == d so the residual is well-typed; attention weights
    per query row sum to 1.
    """
    if tokens.shape[0] == 0:
        raise ShapeError("cross_attention needs a nonempty token sequence")
    if block.w_q.shape[1] != f_t_rows.shape[1]:
        raise ShapeError("residual needs attention width == feature width")
    d_a = block.d_a
    q = nc.matmul(f_t_rows, block.w_q)          # (n, d_a)
    k = nc.matmul(tokens, block.w_k)            # (n_tok, d_a)
    v = nc.matmul(tokens, block.w_v)            # (n_tok, d_a)
    weights = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)),
                                       1.0 / np.sqrt(d_a)))
    return nc.add(f_t_rows, nc.matmul(weights, v))
