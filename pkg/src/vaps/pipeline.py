"""Training and inference orchestration.

Wires the building blocks into one model: retrieval from the prompt
repository, adapter-shifted soft prompts through the frozen text
encoder, cross-attention fusion, the four-term objective, Adam updates,
binary checkpoints, and closed/open-world prediction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import objective
from .data import Dataset
from .encoders import FrozenTextEncoder
from .errors import ConfigError, DivergenceError, FormatError, NonFiniteError
from .evalmetrics import (EvalCurve, MetricsReport, bias_sweep, calibrate_threshold,
                          feasibility_scores, summarize)
from .fusion import (cross_attention, decompose_attr_obj, init_attention,
                     init_projections, pair_logits, retrieval_logits)
from .repository import init_repository, retrieve
from .soft_prompt import (ADAPTER_MODES, adapter_forward, encode_all_pairs,
                          init_adapter, init_soft_prompt, shift_prefix)

_TAG_SHUFFLE = 701

CKPT_MAGIC = b"VAPSCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQ")


@dataclass
class RunConfig:
    """Everything a run needs; validated field by field before use."""

    # widths
    d: int = 32
    d_tok: int = 32
    d_p: int = 32
    d_a: int = 32
    n_tokens: int = 8
    prefix_len: int = 3
    l: int = 4
    # repository
    m: int = 30
    n_select: int = 2
    # loss weights / temperature
    lambda_att_obj: float = 1.0
    lambda_sp: float = 1.0
    tau_init: float = 10.0
    # optimizer
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    # ablation switches
    use_repository: bool = True
    use_adapter: bool = True
    use_cross_attention: bool = True
    # structure options
    adapter_mode: str = "per_token"
    adapter_hidden: int | None = None
    blend_ret_logits: bool = False
    mode: str = "closed"

    def validate(self) -> None:
        positive = ("d", "d_tok", "d_p", "d_a", "n_tokens", "prefix_len", "l",
                    "n_select", "batch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.m < 2:
            raise ConfigError(f"m must be >= 2, got {self.m}")
        if self.n_select > self.m:
            raise ConfigError(f"n_select {self.n_select} exceeds repository size {self.m}")
        if self.d_a != self.d:
            raise ConfigError(
                f"d_a must equal d for the attention residual, got d_a={self.d_a} d={self.d}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.lr:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        for name in ("lambda_att_obj", "lambda_sp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.tau_init <= 0.0:
            raise ConfigError(f"tau_init must be positive, got {self.tau_init}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter_mode must be one of {ADAPTER_MODES}, "
                              f"got {self.adapter_mode!r}")
        if self.adapter_hidden is not None and self.adapter_hidden < 1:
            raise ConfigError(f"adapter_hidden must be >= 1, got {self.adapter_hidden}")
        if self.mode not in ("closed", "open"):
            raise ConfigError(f"mode must be 'closed' or 'open', got {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


# Canonical parameter order: checkpoints and optimizers follow this list.
PARAM_ORDER = ("keys", "prompts", "prefix", "attr_table", "obj_table",
               "ada_w1", "ada_b1", "ada_w2", "ada_b2",
               "proj_v", "proj_t", "proj_ret", "proj_fuse",
               "w_q", "w_k", "w_v", "tau")


class VapsModel:
    """All trainable state plus the frozen text encoder."""

    def __init__(self, config: RunConfig, n_attrs: int, n_objs: int):
        config.validate()
        if n_attrs < 1 or n_objs < 1:
            raise ConfigError("need at least one attribute and one object")
        self.config = config
        self.n_attrs = n_attrs
        self.n_objs = n_objs
        seed = config.seed
        self.repo = init_repository(config.m, config.l, config.d,
                                    config.n_select, seed=seed)
        self.soft = init_soft_prompt(n_attrs, n_objs, config.d_tok,
                                     config.prefix_len, seed=seed)
        self.adapter = init_adapter(config.d, config.d_tok, config.prefix_len,
                                    hidden=config.adapter_hidden,
                                    mode=config.adapter_mode, seed=seed)
        self.proj = init_projections(config.d, config.d_p, seed=seed)
        self.attn = init_attention(config.d, config.d_a, seed=seed)
        self.tau = nc.param(np.asarray(float(config.tau_init)))
        self.text_encoder = FrozenTextEncoder(config.d_tok, config.d,
                                              config.prefix_len + 2, seed=seed)

    def params(self) -> dict[str, nc.Value]:
        return {
            "keys": self.repo.keys, "prompts": self.repo.prompts,
            "prefix": self.soft.prefix, "attr_table": self.soft.attr_table,
            "obj_table": self.soft.obj_table,
            "ada_w1": self.adapter.w1, "ada_b1": self.adapter.b1,
            "ada_w2": self.adapter.w2, "ada_b2": self.adapter.b2,
            "proj_v": self.proj.proj_v, "proj_t": self.proj.proj_t,
            "proj_ret": self.proj.proj_ret, "proj_fuse": self.proj.proj_fuse,
            "w_q": self.attn.w_q, "w_k": self.attn.w_k, "w_v": self.attn.w_v,
            "tau": self.tau,
        }

    def frozen_hashes(self) -> dict[str, str]:
        return {"text_projection": self.text_encoder.params_hash()}

    # -- forward -----------------------------------------------------------

    def sample_forward(self, tokens_data: np.ndarray, pooled_data: np.ndarray,
                       pairs: list[tuple[int, int]], want_retrieval: bool):
        """Logit heads for one image against a candidate pair list.

        Returns (pair_logits, fused_rows, retrieval_logits-or-None).
        Ablation switches replace their stage with the identity: no
        adapter means an unshifted prefix, no cross-attention means the
        text rows pass through unfused, no repository means no retrieval
        head at all.
        """
        cfg = self.config
        # Unit-norm image features at the model boundary: every head
        # downstream scores by cosine, and the adapter stays bounded on
        # out-of-distribution inputs instead of extrapolating freely.
        f_v = nc.normalize(nc.constant(pooled_data))
        bias = adapter_forward(self.adapter, f_v) if cfg.use_adapter else None
        shifted = shift_prefix(self.soft, bias)
        f_t = encode_all_pairs(self.soft, shifted, pairs, self.text_encoder)
        p_logits = pair_logits(f_v, f_t, self.proj, self.tau)
        if cfg.use_cross_attention:
            fused = cross_attention(self.attn, f_t, nc.constant(tokens_data))
        else:
            fused = f_t
        r_logits = None
        if want_retrieval and cfg.use_repository:
            res = retrieve(self.repo, f_v)
            r_logits = retrieval_logits(res.f_ret, fused, self.proj, self.tau)
        return p_logits, fused, r_logits

    def eval_logits(self, records, pairs: list[tuple[int, int]]) -> np.ndarray:
        """(n_records, n_pairs) prediction logits, no graph recording."""
        cfg = self.config
        out = np.empty((len(records), len(pairs)))
        with nc.no_grad():
            for i, r in enumerate(records):
                p_logits, _, r_logits = self.sample_forward(
                    r.tokens, r.pooled, pairs,
                    want_retrieval=cfg.blend_ret_logits)
                row = p_logits.data
                if cfg.blend_ret_logits and r_logits is not None:
                    row = 0.5 * (row + r_logits.data)
                out[i] = row
        return out


@dataclass
class TrainLogRow:
    step: int
    epoch: int
    report: objective.LossReport


@dataclass
class TrainResult:
    model: VapsModel
    optimizer: nc.AdamOptimizer
    log: list[TrainLogRow] = field(default_factory=list)


def train(config: RunConfig, dataset: Dataset) -> TrainResult:
    """Run the optimization loop; deterministic under (config, dataset).

    Per step: encode the batch, per-sample forward for the four logit
    heads over the seen pairs, batch-mean losses, one backward pass, one
    Adam update. A non-finite loss aborts with a diagnostic dump.
    """
    config.validate()
    dataset.validate()
    space = dataset.space
    model = VapsModel(config, space.n_attrs, space.n_objs)
    opt = nc.AdamOptimizer(model.params(), lr=config.lr,
                           beta1=config.beta1, beta2=config.beta2)
    weights = objective.LossWeights(config.lambda_att_obj, config.lambda_sp)
    seen_pairs = list(space.seen_pairs)
    seen_index = {p: k for k, p in enumerate(seen_pairs)}
    train_records = dataset.split("train")
    if not train_records:
        raise ConfigError("dataset has no train records")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_SHUFFLE]))
    log: list[TrainLogRow] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_records))
        for lo in range(0, len(order), config.batch_size):
            batch = [train_records[i] for i in order[lo:lo + config.batch_size]]
            step += 1
            try:
                row = _train_step(model, opt, batch, seen_pairs, seen_index, weights)
            except NonFiniteError as e:
                raise DivergenceError(
                    f"non-finite loss at step {step}: {e}",
                    diagnostics=_divergence_dump(model, step, epoch)) from e
            log.append(TrainLogRow(step=step, epoch=epoch, report=row))
    return TrainResult(model=model, optimizer=opt, log=log)


def batch_loss(model: VapsModel, batch, seen_pairs, seen_index,
               weights: objective.LossWeights
               ) -> tuple[nc.Value, objective.LossReport]:
    """Forward the batch through all four heads and combine the losses.

    Pure in the model parameters: no gradient or optimizer state is
    touched, so callers can finite-difference the returned total.
    """
    attr_vecs, attr_targets = [], []
    obj_vecs, obj_targets = [], []
    sp_vecs, ret_vecs, pair_targets = [], [], []
    for r in batch:
        p_logits, _, r_logits = model.sample_forward(
            r.tokens, r.pooled, seen_pairs, want_retrieval=True)
        attr_logits, obj_logits = decompose_attr_obj(
            p_logits, seen_pairs, model.n_attrs, model.n_objs)
        attr_vecs.append(attr_logits)
        attr_targets.append(r.attr)
        obj_vecs.append(obj_logits)
        obj_targets.append(r.obj)
        sp_vecs.append(p_logits)
        pair_targets.append(seen_index[(r.attr, r.obj)])
        if r_logits is not None:
            ret_vecs.append(r_logits)
    l_att = objective.loss_primitive(attr_vecs, attr_targets)
    l_obj = objective.loss_primitive(obj_vecs, obj_targets)
    l_sp = objective.loss_sp(sp_vecs, pair_targets, len(seen_pairs))
    if ret_vecs:
        l_ret = objective.loss_ret(ret_vecs, pair_targets, len(seen_pairs))
    else:
        l_ret = nc.constant(np.asarray(0.0))
    l_total = objective.loss_total(l_ret, l_att, l_obj, l_sp, weights)
    report = objective.report_from(l_att, l_obj, l_sp, l_ret, l_total, weights)
    return l_total, report


def _train_step(model: VapsModel, opt: nc.AdamOptimizer, batch, seen_pairs,
                seen_index, weights: objective.LossWeights) -> objective.LossReport:
    opt.zero_grad()
    l_total, report = batch_loss(model, batch, seen_pairs, seen_index, weights)
    nc.backward(l_total)
    opt.step()
    return report


def _divergence_dump(model: VapsModel, step: int, epoch: int) -> dict:
    stats = {}
    for name, p in model.params().items():
        finite = np.isfinite(p.data).all()
        stats[name] = {"finite": bool(finite),
                       "max_abs": float(np.max(np.abs(p.data[np.isfinite(p.data)]),
                                               initial=0.0))}
    return {"step": step, "epoch": epoch, "param_stats": stats}


# -- prediction ----------------------------------------------------------


def predict_closed(model: VapsModel, record, pairs: list[tuple[int, int]]
                   ) -> tuple[int, int]:
    """Argmax pair over the candidate list; ties go to the lower index."""
    if not pairs:
        raise ConfigError("candidate pair list is empty")
    logits = model.eval_logits([record], pairs)[0]
    return pairs[int(np.argmax(logits))]


def predict_open(model: VapsModel, record, pairs: list[tuple[int, int]],
                 feasibility: np.ndarray, threshold: float) -> tuple[int, int]:
    """Argmax restricted to pairs whose feasibility clears the threshold."""
    feasible = np.asarray(feasibility) >= threshold
    if not feasible.any():
        raise ConfigError(
            f"no pair is feasible at threshold {threshold}; recalibrate")
    logits = model.eval_logits([record], pairs)[0]
    return pairs[int(np.argmax(np.where(feasible, logits, -np.inf)))]


# -- evaluation ------------------------------------------------------------


@dataclass
class EvalResult:
    report: MetricsReport
    curve: EvalCurve
    pairs: list[tuple[int, int]]
    threshold: float | None = None
    feasibility: np.ndarray | None = None


def evaluate(model: VapsModel, dataset: Dataset, split: str = "test",
             mode: str = "closed", threshold: float | str | None = None) -> EvalResult:
    """Sweep-protocol evaluation of one dataset split.

    Closed world scores over the dataset's test-pair universe. Open
    world scores over the full attribute x object grid with feasibility
    filtering; ``threshold`` may be a number, None/"auto" (calibrate on
    the val split), or -inf for no filtering. A split containing only
    seen-labeled samples (e.g. train) degenerates to a two-point curve
    holding its seen accuracy.
    """
    space = dataset.space
    records = dataset.split(split)
    if not records:
        raise ConfigError(f"split {split!r} has no records")
    if mode == "closed":
        pairs = list(space.test_pairs)
        feas = None
        t = None
        feasible_mask = None
    elif mode == "open":
        pairs = [(a, o) for a in range(space.n_attrs) for o in range(space.n_objs)]
        feas = feasibility_scores(model.soft.attr_table.data,
                                  model.soft.obj_table.data,
                                  space.seen_pairs, pairs)
        t = _resolve_threshold(model, dataset, pairs, feas, threshold)
        feasible_mask = space.seen_mask(pairs) | (feas >= t)
    else:
        raise ConfigError(f"mode must be 'closed' or 'open', got {mode!r}")

    pair_index = {p: k for k, p in enumerate(pairs)}
    missing = [(r.attr, r.obj) for r in records if (r.attr, r.obj) not in pair_index]
    if missing:
        raise ConfigError(f"labels outside the candidate pair universe: {missing[:4]}")
    labels = np.array([pair_index[(r.attr, r.obj)] for r in records])
    logits = model.eval_logits(records, pairs)
    seen_mask = space.seen_mask(pairs)

    if bool((~seen_mask[labels]).any()):
        curve = bias_sweep(logits, labels, seen_mask, feasible_mask)
    else:
        # seen-only split: no sweep to trace, keep S and zero the rest
        cols = seen_mask.copy()
        if feasible_mask is not None:
            cols &= feasible_mask
        preds = np.argmax(np.where(cols[None, :], logits, -np.inf), axis=1)
        acc = float(np.mean(preds == labels))
        curve = EvalCurve(points=[(-math.inf, acc, 0.0), (math.inf, 0.0, 0.0)],
                          n_samples=len(records), n_pairs=len(pairs),
                          n_seen_pairs=int(seen_mask.sum()))
    return EvalResult(report=summarize(curve), curve=curve, pairs=pairs,
                      threshold=t, feasibility=feas)


def _resolve_threshold(model, dataset, pairs, feas, threshold) -> float:
    if isinstance(threshold, (int, float)):
        return float(threshold)
    if threshold not in (None, "auto"):
        raise ConfigError(f"threshold must be a number, None, or 'auto', "
                          f"got {threshold!r}")
    val_records = dataset.split("val")
    if not val_records:
        raise ConfigError("threshold calibration needs a val split")
    space = dataset.space
    pair_index = {p: k for k, p in enumerate(pairs)}
    labels = np.array([pair_index[(r.attr, r.obj)] for r in val_records])
    logits = model.eval_logits(val_records, pairs)
    return calibrate_threshold(logits, labels, space.seen_mask(pairs), feas)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: VapsModel, optimizer: nc.AdamOptimizer,
                    step: int) -> None:
    """Versioned binary: JSON header + f64 little-endian parameter blobs.

    Writing the result of load_checkpoint reproduces the file byte for
    byte (sorted JSON keys, fixed parameter order, no timestamps).
    """
    params = model.params()
    header = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "n_attrs": model.n_attrs,
        "n_objs": model.n_objs,
        "step": int(step),
        "params": [{"name": n, "shape": list(params[n].shape)} for n in PARAM_ORDER],
        "adam": {"step_count": optimizer.step_count, "lr": optimizer.lr,
                 "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                 "eps": optimizer.eps},
        "frozen": model.frozen_hashes(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)), blob]
    for name in PARAM_ORDER:
        chunks.append(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    for name in PARAM_ORDER:
        chunks.append(np.ascontiguousarray(optimizer.m[name], dtype="<f8").tobytes())
    for name in PARAM_ORDER:
        chunks.append(np.ascontiguousarray(optimizer.v[name], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


@dataclass
class Checkpoint:
    config: RunConfig
    n_attrs: int
    n_objs: int
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step_count: int
    frozen: dict[str, str]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, jlen = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    try:
        header = json.loads(raw[off:off + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from e
    off += jlen
    config = RunConfig.from_dict(header["config"])
    manifest = header["params"]
    if [m["name"] for m in manifest] != list(PARAM_ORDER):
        raise FormatError("checkpoint parameter manifest out of order")
    blob_bytes = 3 * sum(8 * int(np.prod(m["shape"]) if m["shape"] else 1)
                         for m in manifest)
    if len(raw) - off < blob_bytes:
        raise FormatError(f"checkpoint truncated: expected {blob_bytes} "
                          f"parameter bytes, found {len(raw) - off}")

    def read_block(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        return arr.astype(np.float64).reshape(shape)

    params = {m["name"]: read_block(m["shape"]) for m in manifest}
    adam_m = {m["name"]: read_block(m["shape"]) for m in manifest}
    adam_v = {m["name"]: read_block(m["shape"]) for m in manifest}
    if off != len(raw):
        raise FormatError(f"checkpoint has {len(raw) - off} trailing bytes")
    return Checkpoint(config=config, n_attrs=header["n_attrs"],
                      n_objs=header["n_objs"], step=header["step"],
                      params=params, adam_m=adam_m, adam_v=adam_v,
                      adam_step_count=header["adam"]["step_count"],
                      frozen=header["frozen"])


def restore(ckpt: Checkpoint) -> tuple[VapsModel, nc.AdamOptimizer]:
    """Rebuild a model + optimizer in the exact saved state."""
    model = VapsModel(ckpt.config, ckpt.n_attrs, ckpt.n_objs)
    params = model.params()
    for name, arr in ckpt.params.items():
        if params[name].data.shape != arr.shape:
            raise FormatError(f"shape mismatch restoring {name!r}")
        params[name].data[...] = arr
    opt = nc.AdamOptimizer(params, lr=ckpt.config.lr, beta1=ckpt.config.beta1,
                           beta2=ckpt.config.beta2)
    opt.step_count = ckpt.adam_step_count
    for name in params:
        opt.m[name][...] = ckpt.adam_m[name]
        opt.v[name][...] = ckpt.adam_v[name]
    expected = model.frozen_hashes()
    if ckpt.frozen != expected:
        raise FormatError("frozen-encoder hash mismatch: checkpoint was written "
                          "against different encoder parameters")
    return model, opt


def ablation_variants(config: RunConfig) -> dict[str, RunConfig]:
    """The standard comparison set: full model and three single-switch cuts."""
    return {
        "full": config,
        "no-pr": replace(config, use_repository=False),
        "no-pa": replace(config, use_adapter=False),
        "no-ca": replace(config, use_cross_attention=False),
    }
