"""Binary feature-file format and its sibling labels JSON.

Layout (all little-endian):

    header:  magic "VAPSFEAT" (8 bytes) | version u32 | d u32 | n_tokens u32 | count u64
    record:  sample_id u64 | attr u32 | obj u32 | split u8
             | n_tokens*d f32 token matrix (row-major) | d f32 pooled vector

Labels and pair splits live in a sibling JSON file (same path with the
extension replaced by ``.labels.json``): attribute names, object names,
and the seen/unseen pair index lists.

Values are stored as f32 and handed out as f64. The saver quantizes to
f32 before writing, so write -> read -> write reproduces the original
bytes exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VAPSFEAT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sIIIQ")
_RECORD_FIXED = struct.Struct("<QIIB")

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}


@dataclass
class FeatureRecord:
    """One labeled feature row: token matrix plus pooled vector."""

    sample_id: int
    attr: int
    obj: int
    split: str
    tokens: np.ndarray  # (n_tokens, d) float64
    pooled: np.ndarray  # (d,) float64


@dataclass
class LabelInfo:
    """Sidecar label vocabulary and pair-split bookkeeping."""

    attributes: list[str]
    objects: list[str]
    seen_pairs: list[tuple[int, int]]
    unseen_pairs: list[tuple[int, int]] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "attributes": list(self.attributes),
            "objects": list(self.objects),
            "pair_splits": {
                "seen": [list(p) for p in self.seen_pairs],
                "unseen": [list(p) for p in self.unseen_pairs],
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "LabelInfo":
        try:
            splits = obj["pair_splits"]
            return cls(
                attributes=list(obj["attributes"]),
                objects=list(obj["objects"]),
                seen_pairs=[tuple(p) for p in splits["seen"]],
                unseen_pairs=[tuple(p) for p in splits.get("unseen", [])],
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"labels JSON missing field: {e}") from e


def labels_path(feat_path) -> Path:
    """Sibling labels file: extension swapped for .labels.json."""
    p = Path(feat_path)
    return p.with_suffix(".labels.json")


def write_features(feat_path, records: list[FeatureRecord], labels: LabelInfo,
                   d: int, n_tokens: int) -> None:
    """Write the binary file and its labels sidecar atomically enough.

    ``d``/``n_tokens`` are taken explicitly (not sniffed from records)
    so an empty dataset still carries well-formed dimensions.
    """
    if d < 1 or n_tokens < 1:
        raise FormatError(f"d and n_tokens must be positive, got d={d} n_tokens={n_tokens}")
    path = Path(feat_path)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, d, n_tokens, len(records))]
    for r in records:
        tokens = np.ascontiguousarray(r.tokens, dtype="<f4")
        pooled = np.ascontiguousarray(r.pooled, dtype="<f4")
        if tokens.shape != (n_tokens, d):
            raise FormatError(
                f"record {r.sample_id}: token shape {tokens.shape} != ({n_tokens}, {d})")
        if pooled.shape != (d,):
            raise FormatError(f"record {r.sample_id}: pooled shape {pooled.shape} != ({d},)")
        if r.split not in SPLIT_CODES:
            raise FormatError(f"record {r.sample_id}: unknown split {r.split!r}")
        chunks.append(_RECORD_FIXED.pack(r.sample_id, r.attr, r.obj, SPLIT_CODES[r.split]))
        chunks.append(tokens.tobytes())
        chunks.append(pooled.tobytes())
    path.write_bytes(b"".join(chunks))
    labels_path(path).write_text(
        json.dumps(labels.to_json_dict(), sort_keys=True, indent=1) + "\n")


def read_header(feat_path) -> tuple[int, int, int, int]:
    """Return (version, d, n_tokens, count) after magic/version checks."""
    raw = Path(feat_path).read_bytes()
    return _parse_header(raw)[0:4]


def _parse_header(raw: bytes):
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than header")
    magic, version, d, n_tokens, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if d < 1 or n_tokens < 1:
        raise FormatError(f"degenerate dimensions d={d} n_tokens={n_tokens}")
    return version, d, n_tokens, count


def read_features(feat_path, expected_d: int | None = None,
                  expected_n_tokens: int | None = None,
                  ) -> tuple[list[FeatureRecord], LabelInfo, int, int]:
    """Load records + labels. Returns (records, labels, d, n_tokens)."""
    path = Path(feat_path)
    raw = path.read_bytes()
    _, d, n_tokens, count = _parse_header(raw)
    if expected_d is not None and d != expected_d:
        raise FormatError(f"feature dimension {d} does not match expected {expected_d}")
    if expected_n_tokens is not None and n_tokens != expected_n_tokens:
        raise FormatError(f"token count {n_tokens} does not match expected {expected_n_tokens}")

    rec_size = _RECORD_FIXED.size + 4 * (n_tokens * d + d)
    body = raw[_HEADER.size:]
    if len(body) != count * rec_size:
        raise FormatError(
            f"payload is {len(body)} bytes, expected {count * rec_size} for {count} records")

    lp = labels_path(path)
    if not lp.exists():
        raise FormatError(f"missing labels sidecar {lp}")
    labels = LabelInfo.from_json_dict(json.loads(lp.read_text()))

    n_a, n_o = len(labels.attributes), len(labels.objects)
    records: list[FeatureRecord] = []
    off = 0
    for _ in range(count):
        sample_id, attr, obj, split_code = _RECORD_FIXED.unpack_from(body, off)
        off += _RECORD_FIXED.size
        if attr >= n_a or obj >= n_o:
            raise FormatError(f"record {sample_id}: label ({attr},{obj}) outside "
                              f"{n_a} attributes x {n_o} objects")
        if split_code not in SPLIT_NAMES:
            raise FormatError(f"record {sample_id}: unknown split code {split_code}")
        tok = np.frombuffer(body, dtype="<f4", count=n_tokens * d, offset=off)
        off += 4 * n_tokens * d
        pooled = np.frombuffer(body, dtype="<f4", count=d, offset=off)
        off += 4 * d
        records.append(FeatureRecord(
            sample_id=sample_id, attr=attr, obj=obj, split=SPLIT_NAMES[split_code],
            tokens=tok.astype(np.float64).reshape(n_tokens, d),
            pooled=pooled.astype(np.float64)))
    return records, labels, d, n_tokens


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    d: int = 0
    n_tokens: int = 0
    count: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_features(feat_path) -> ValidationReport:
    """Structural + semantic validation; never raises on bad content.

    Errors: anything that would make the file unusable (bad header,
    truncated payload, out-of-range labels, non-finite values, train
    samples labeled with unseen pairs). Warnings: suspicious but
    loadable content (pooled vector differing from the token mean,
    duplicate sample ids, train pairs absent from the seen list).
    """
    rep = ValidationReport()
    try:
        records, labels, d, n_tokens = read_features(feat_path)
    except (FormatError, OSError, json.JSONDecodeError) as e:
        rep.errors.append(str(e))
        return rep
    rep.d, rep.n_tokens, rep.count = d, n_tokens, len(records)

    seen = set(map(tuple, labels.seen_pairs))
    unseen = set(map(tuple, labels.unseen_pairs))
    if seen & unseen:
        rep.errors.append(f"{len(seen & unseen)} pairs listed as both seen and unseen")

    ids_seen: set[int] = set()
    n_dup = n_offmean = n_unlisted = 0
    max_gap = 0.0
    for r in records:
        pair = (r.attr, r.obj)
        if not np.all(np.isfinite(r.tokens)) or not np.all(np.isfinite(r.pooled)):
            rep.errors.append(f"record {r.sample_id}: non-finite values")
        if r.split == "train":
            if pair in unseen:
                rep.errors.append(f"train record {r.sample_id} labeled with unseen pair {pair}")
            elif pair not in seen:
                n_unlisted += 1
        if r.sample_id in ids_seen:
            n_dup += 1
        ids_seen.add(r.sample_id)
        gap = float(np.max(np.abs(r.pooled - r.tokens.mean(axis=0)), initial=0.0))
        if gap > 1e-5:
            n_offmean += 1
            max_gap = max(max_gap, gap)
    if n_unlisted:
        rep.warnings.append(f"{n_unlisted} train records with pairs absent from the seen list")
    if n_dup:
        rep.warnings.append(f"{n_dup} duplicate sample_ids")
    if n_offmean:
        # External producers may pool differently (e.g. a designated
        # token); that is legal, just worth surfacing.
        rep.warnings.append(
            f"{n_offmean} records whose pooled vector differs from the token mean "
            f"(max gap {max_gap:.3g}); a non-mean pooling rule is allowed")
    return rep
