"""Learnable text-prompt machinery.

A soft prompt is [prefix tokens..., attribute token, object token] in
embedding space. A small adapter network turns the image feature into a
bias that shifts the prefix per image, so the text side is conditioned
on what the image looks like before any pair is scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import FrozenTextEncoder
from .errors import ConfigError, ShapeError

_TAG_PREFIX = 401
_TAG_ATTR_TABLE = 402
_TAG_OBJ_TABLE = 403
_TAG_ADA_W1 = 501
_TAG_ADA_W2 = 502
INIT_STD = 0.02

ADAPTER_MODES = ("per_token", "shared")


@dataclass
class SoftPrompt:
    prefix: nc.Value      # (prefix_len, d_tok)
    attr_table: nc.Value  # (n_attrs, d_tok)
    obj_table: nc.Value   # (n_objs, d_tok)

    @property
    def prefix_len(self) -> int:
        return self.prefix.shape[0]

    @property
    def d_tok(self) -> int:
        return self.prefix.shape[1]

    @property
    def seq_len(self) -> int:
        return self.prefix_len + 2


@dataclass
class PromptAdapter:
    w1: nc.Value  # (d, h)
    b1: nc.Value  # (h,)
    w2: nc.Value  # (h, out)
    b2: nc.Value  # (out,)
    mode: str
    prefix_len: int
    d_tok: int


def init_soft_prompt(n_attrs: int, n_objs: int, d_tok: int,
                     prefix_len: int = 3, seed: int = 0) -> SoftPrompt:
    if prefix_len < 1:
        raise ConfigError(f"prefix_len must be >= 1, got {prefix_len}")
    rng = lambda tag: np.random.default_rng(np.random.SeedSequence([seed, tag]))
    return SoftPrompt(
        prefix=nc.param(rng(_TAG_PREFIX).normal(0.0, INIT_STD, (prefix_len, d_tok))),
        attr_table=nc.param(rng(_TAG_ATTR_TABLE).normal(0.0, INIT_STD, (n_attrs, d_tok))),
        obj_table=nc.param(rng(_TAG_OBJ_TABLE).normal(0.0, INIT_STD, (n_objs, d_tok))))


def init_adapter(d: int, d_tok: int, prefix_len: int, hidden: int | None = None,
                 mode: str = "per_token", seed: int = 0) -> PromptAdapter:
    if mode not in ADAPTER_MODES:
        raise ConfigError(f"adapter mode must be one of {ADAPTER_MODES}, got {mode!r}")
    h = hidden if hidden is not None else max(1, d // 2)
    if h < 1:
        raise ConfigError(f"adapter hidden width must be >= 1, got {h}")
    out = prefix_len * d_tok if mode == "per_token" else d_tok
    rng = lambda tag: np.random.default_rng(np.random.SeedSequence([seed, tag]))
    return PromptAdapter(
        w1=nc.param(rng(_TAG_ADA_W1).normal(0.0, 1.0 / np.sqrt(d), (d, h))),
        b1=nc.param(np.zeros(h)),
        w2=nc.param(rng(_TAG_ADA_W2).normal(0.0, INIT_STD, (h, out))),
        b2=nc.param(np.zeros(out)),
        mode=mode, prefix_len=prefix_len, d_tok=d_tok)


def adapter_forward(adapter: PromptAdapter, f_v: nc.Value) -> nc.Value:
    """Two-layer ReLU net: bias = w2 . relu(w1 . f_v + b1) + b2.

    Returns (prefix_len, d_tok) in per_token mode, (d_tok,) in shared
    mode.
    """
    if f_v.shape != (adapter.w1.shape[0],):
        raise ShapeError(f"f_v shape {f_v.shape} != ({adapter.w1.shape[0]},)")
    hidden = nc.relu(nc.add(nc.matmul(f_v, adapter.w1), adapter.b1))
    flat = nc.add(nc.matmul(hidden, adapter.w2), adapter.b2)
    if adapter.mode == "per_token":
        return nc.reshape(flat, (adapter.prefix_len, adapter.d_tok))
    return flat


def shift_prefix(prompt: SoftPrompt, bias: nc.Value | None) -> nc.Value:
    """Add the adapter bias to the prefix tokens; None means no shift.

    The stored prefix is never mutated: the shifted copy is a graph node
    on top of it.
    """
    if bias is None:
        return prompt.prefix
    if bias.data.ndim == 2:
        if bias.shape != prompt.prefix.shape:
            raise ShapeError(f"bias shape {bias.shape} != {prompt.prefix.shape}")
        return nc.add(prompt.prefix, bias)
    if bias.shape != (prompt.d_tok,):
        raise ShapeError(f"shared bias shape {bias.shape} != ({prompt.d_tok},)")
    return nc.add(prompt.prefix, bias)  # row broadcast


def build_pair_prompt(prompt: SoftPrompt, shifted_prefix: nc.Value,
                      attr: int, obj: int) -> nc.Value:
    """[shifted prefix rows..., attr embedding, obj embedding]."""
    if not 0 <= attr < prompt.attr_table.shape[0]:
        raise IndexError(f"attribute index {attr} out of range")
    if not 0 <= obj < prompt.obj_table.shape[0]:
        raise IndexError(f"object index {obj} out of range")
    return nc.concat_rows([shifted_prefix,
                           nc.take_row(prompt.attr_table, attr),
                           nc.take_row(prompt.obj_table, obj)])


def encode_all_pairs(prompt: SoftPrompt, shifted_prefix: nc.Value,
                     pairs: list[tuple[int, int]],
                     encoder: FrozenTextEncoder) -> nc.Value:
    """Text features for every candidate pair under one shared prefix.

    Batched equivalent of encode_text over build_pair_prompt: since the
    encoder mean-pools tokens, each row's pool is
    (sum(prefix) + attr_emb + obj_emb) / seq_len, which vectorizes into
    two table gathers and a broadcast add.
    """
    if not pairs:
        raise ShapeError("encode_all_pairs needs at least one pair")
    a_idx = [a for a, _ in pairs]
    o_idx = [o for _, o in pairs]
    prefix_sum = nc.sum_axis(shifted_prefix, 0)  # (d_tok,)
    rows = nc.add(nc.add(nc.take_rows(prompt.attr_table, a_idx),
                         nc.take_rows(prompt.obj_table, o_idx)),
                  prefix_sum)
    pooled = nc.scale(rows, 1.0 / prompt.seq_len)
    return encoder.encode_pooled_rows(pooled)
