"""Writer for the VAPS-FEAT binary and its labels JSON sidecar.

The consumer documents the layout as follows, all little-endian:

    header:  magic "VAPSFEAT" (8 bytes) | version u32 | d u32
             | n_tokens u32 | count u64
    record:  sample_id u64 | attr u32 | obj u32 | split u8
             | n_tokens*d f32 token matrix (row-major) | d f32 pooled

The sidecar lives next to the binary with the extension replaced by
``.labels.json`` and carries the attribute/object vocabularies plus the
seen/unseen pair index lists. This module reimplements the format from
that contract on purpose; it imports nothing from the consumer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VAPSFEAT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sIIIQ")
_RECORD_FIXED = struct.Struct("<QIIB")

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class ExportRecord:
    sample_id: int
    attr: int
    obj: int
    split: str
    tokens: np.ndarray  # (n_tokens, d) float32
    pooled: np.ndarray  # (d,) float32


def labels_path(feat_path) -> Path:
    return Path(feat_path).with_suffix(".labels.json")


def write_feat(path, records: list[ExportRecord], d: int, n_tokens: int) -> None:
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, d, n_tokens, len(records))]
    for r in records:
        tokens = np.ascontiguousarray(r.tokens, dtype="<f4")
        pooled = np.ascontiguousarray(r.pooled, dtype="<f4")
        if tokens.shape != (n_tokens, d) or pooled.shape != (d,):
            raise ValueError(f"record {r.sample_id}: shape mismatch")
        chunks.append(_RECORD_FIXED.pack(r.sample_id, r.attr, r.obj,
                                         SPLIT_CODES[r.split]))
        chunks.append(tokens.tobytes())
        chunks.append(pooled.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def write_labels(feat_path, attributes: list[str], objects: list[str],
                 seen_pairs: list[tuple[int, int]],
                 unseen_pairs: list[tuple[int, int]]) -> Path:
    payload = {
        "attributes": list(attributes),
        "objects": list(objects),
        "pair_splits": {
            "seen": [list(p) for p in seen_pairs],
            "unseen": [list(p) for p in unseen_pairs],
        },
    }
    out = labels_path(feat_path)
    out.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return out
