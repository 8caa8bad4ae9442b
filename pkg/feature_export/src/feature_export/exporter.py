"""Orchestration: split CSVs + vocab + image folder -> VAPS-FEAT.

Split files are CSVs with the header ``image,attribute,object,split``.
Image paths are resolved against the dataset directory. Labels must
come from the declared vocabulary (hard error otherwise); an image that
cannot be decoded is skipped with a logged warning and listed in the
manifest, since a missing file should cost one record, not the run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .encoders import DEFAULT_ENCODER, build_encoder, load_image
from .featwriter import SPLIT_CODES, ExportRecord, write_feat, write_labels

log = logging.getLogger("feature_export")


class ExportError(Exception):
    """User-input problem: bad vocab, bad split row, bad geometry."""


@dataclass
class SplitRow:
    image: str
    attr: int
    obj: int
    split: str


@dataclass
class ExportManifest:
    encoder_name: str
    encoder_version: str
    pool: str
    image_count: int
    d: int
    n_tokens: int
    dataset_name: str
    split_sources: list[dict] = field(default_factory=list)
    vocab_source: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    tool_version: str = __version__

    def to_json_dict(self) -> dict:
        return {
            "tool": "vaps-export",
            "tool_version": self.tool_version,
            "encoder": {"name": self.encoder_name, "version": self.encoder_version},
            "pool": self.pool,
            "image_count": self.image_count,
            "d": self.d,
            "n_tokens": self.n_tokens,
            "dataset_name": self.dataset_name,
            "split_sources": self.split_sources,
            "vocab_source": self.vocab_source,
            "outputs": self.outputs,
            "skipped": list(self.skipped),
        }


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_vocab(path) -> tuple[list[str], list[str]]:
    try:
        obj = json.loads(Path(path).read_text())
        attributes = list(obj["attributes"])
        objects = list(obj["objects"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ExportError(f"unreadable vocab file {path}: {e}") from e
    for name, vocab in (("attributes", attributes), ("objects", objects)):
        if not vocab:
            raise ExportError(f"vocab {name} list is empty")
        if len(set(vocab)) != len(vocab):
            raise ExportError(f"vocab {name} list has duplicates")
    return attributes, objects


def read_split_file(path, attr_index: dict, obj_index: dict) -> list[SplitRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"image", "attribute", "object", "split"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise ExportError(f"{path}: split CSV needs columns {sorted(needed)}")
        for lineno, row in enumerate(reader, start=2):
            attr, obj = row["attribute"], row["object"]
            if attr not in attr_index:
                raise ExportError(
                    f"{path}:{lineno}: attribute {attr!r} not in the declared vocabulary")
            if obj not in obj_index:
                raise ExportError(
                    f"{path}:{lineno}: object {obj!r} not in the declared vocabulary")
            if row["split"] not in SPLIT_CODES:
                raise ExportError(
                    f"{path}:{lineno}: split {row['split']!r} not one of "
                    f"{sorted(SPLIT_CODES)}")
            rows.append(SplitRow(image=row["image"], attr=attr_index[attr],
                                 obj=obj_index[obj], split=row["split"]))
    return rows


def subsample_indices(n_patches: int, k: int) -> np.ndarray:
    """k strictly increasing indices spread uniformly over [0, n_patches)."""
    if k < 1:
        raise ExportError(f"token count must be >= 1, got {k}")
    if k > n_patches:
        raise ExportError(
            f"token count {k} exceeds the encoder's {n_patches} patches")
    return np.round(np.linspace(0, n_patches - 1, k)).astype(int)


def export(images_dir, split_files, vocab_path, out_path, pool: str = "mean",
           tokens: int = 8, image_size: int = 32,
           encoder_name: str = DEFAULT_ENCODER,
           dataset_name: str | None = None) -> ExportManifest:
    if pool not in ("cls", "mean"):
        raise ExportError(f"pool must be 'cls' or 'mean', got {pool!r}")
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise ExportError(f"dataset directory not found: {images_dir}")
    attributes, objects = load_vocab(vocab_path)
    attr_index = {a: i for i, a in enumerate(attributes)}
    obj_index = {o: i for i, o in enumerate(objects)}

    rows: list[tuple[int, SplitRow]] = []
    for path in split_files:
        for row in read_split_file(path, attr_index, obj_index):
            rows.append((len(rows), row))
    if not rows:
        raise ExportError("split files contain no records")

    try:
        encoder = build_encoder(encoder_name, image_size)
    except ValueError as e:
        raise ExportError(str(e)) from e
    keep = subsample_indices(encoder.n_patches, tokens)

    loaded: list[tuple[int, SplitRow, np.ndarray]] = []
    skipped: list[str] = []
    for sample_id, row in rows:
        try:
            loaded.append((sample_id, row, load_image(images_dir / row.image,
                                                      image_size)))
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", row.image, e)
            skipped.append(row.image)
    if not loaded:
        raise ExportError("no readable images; nothing to export")

    batch = torch.from_numpy(np.stack([img for _, _, img in loaded]))
    cls, patches = encoder.encode(batch)
    cls = cls.numpy()
    patches = patches.numpy()[:, keep, :]  # (B, k, d)

    records = []
    for pos, (sample_id, row, _) in enumerate(loaded):
        toks = patches[pos].astype(np.float32)
        if pool == "mean":
            pooled = toks.astype(np.float64).mean(axis=0).astype(np.float32)
        else:
            pooled = cls[pos].astype(np.float32)
        records.append(ExportRecord(sample_id=sample_id, attr=row.attr,
                                    obj=row.obj, split=row.split,
                                    tokens=toks, pooled=pooled))

    seen = sorted({(r.attr, r.obj) for _, r, _ in loaded if r.split == "train"})
    others = {(r.attr, r.obj) for _, r, _ in loaded if r.split != "train"}
    unseen = sorted(others - set(seen))

    out_path = Path(out_path)
    write_feat(out_path, records, d=encoder.width, n_tokens=tokens)
    labels_file = write_labels(out_path, attributes, objects, seen, unseen)

    manifest = ExportManifest(
        encoder_name=encoder.name, encoder_version=encoder.version, pool=pool,
        image_count=len(records), d=encoder.width, n_tokens=tokens,
        dataset_name=dataset_name or images_dir.name,
        split_sources=[{"path": str(p), "sha256": _sha256(p)} for p in split_files],
        vocab_source={"path": str(vocab_path), "sha256": _sha256(vocab_path)},
        outputs={"features": _sha256(out_path), "labels": _sha256(labels_file)},
        skipped=skipped)
    manifest_path = out_path.with_name(out_path.name + ".manifest.json")
    manifest_path.write_text(
        json.dumps(manifest.to_json_dict(), sort_keys=True, indent=1) + "\n")
    return manifest
