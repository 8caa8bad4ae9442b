"""Composition-space bookkeeping and synthetic dataset generation.

A composition space is the Cartesian grid of attribute and object
primitives split into seen pairs (available for training) and unseen
pairs (evaluation only). The synthetic generator fabricates labeled
feature records over that grid via the feature-space image encoder, so
a full train/val/test dataset exists without any images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import featfile
from .encoders import SyntheticImageEncoder
from .errors import ConfigError

# Sample-index offsets keep noise streams of the three splits disjoint
# for the same (attr, obj) pair.
VAL_IDX_OFFSET = 10_000
TEST_IDX_OFFSET = 20_000


@dataclass
class CompositionSpace:
    """Primitives plus the seen/unseen/eval pair universes (index pairs)."""

    attributes: list[str]
    objects: list[str]
    seen_pairs: list[tuple[int, int]]
    unseen_pairs: list[tuple[int, int]]
    test_pairs: list[tuple[int, int]] = field(default_factory=list)
    val_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.test_pairs:
            self.test_pairs = list(self.seen_pairs) + list(self.unseen_pairs)
        if not self.val_pairs:
            self.val_pairs = list(self.test_pairs)
        self.validate()

    def validate(self) -> None:
        n_a, n_o = len(self.attributes), len(self.objects)
        seen, unseen = set(self.seen_pairs), set(self.unseen_pairs)
        if seen & unseen:
            raise ConfigError("seen_pairs and unseen_pairs overlap")
        universe = seen | unseen
        for (a, o) in universe:
            if not (0 <= a < n_a and 0 <= o < n_o):
                raise ConfigError(f"pair ({a},{o}) outside the {n_a}x{n_o} grid")
        for name, pairs in (("test_pairs", self.test_pairs), ("val_pairs", self.val_pairs)):
            extra = set(pairs) - universe
            if extra:
                raise ConfigError(f"{name} contains pairs outside seen+unseen: {sorted(extra)}")
        if not seen:
            raise ConfigError("seen_pairs is empty")
        covered_a = {a for a, _ in seen}
        covered_o = {o for _, o in seen}
        if covered_a != set(range(n_a)):
            missing = sorted(set(range(n_a)) - covered_a)
            raise ConfigError(f"attributes with no seen pair: {missing}")
        if covered_o != set(range(n_o)):
            missing = sorted(set(range(n_o)) - covered_o)
            raise ConfigError(f"objects with no seen pair: {missing}")

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @property
    def n_objs(self) -> int:
        return len(self.objects)

    def seen_mask(self, pairs: list[tuple[int, int]]) -> np.ndarray:
        """Boolean mask over ``pairs``: True where the pair is seen."""
        seen = set(self.seen_pairs)
        return np.array([p in seen for p in pairs], dtype=bool)

    def to_labels(self) -> featfile.LabelInfo:
        return featfile.LabelInfo(
            attributes=list(self.attributes), objects=list(self.objects),
            seen_pairs=list(self.seen_pairs), unseen_pairs=list(self.unseen_pairs))

    @classmethod
    def from_labels(cls, labels: featfile.LabelInfo) -> "CompositionSpace":
        return cls(attributes=list(labels.attributes), objects=list(labels.objects),
                   seen_pairs=list(labels.seen_pairs),
                   unseen_pairs=list(labels.unseen_pairs))


def default_names(n_attrs: int, n_objs: int) -> tuple[list[str], list[str]]:
    return ([f"attr{i:02d}" for i in range(n_attrs)],
            [f"obj{i:02d}" for i in range(n_objs)])


def split_pairs(attributes: list[str], objects: list[str], seen_fraction: float,
                val_fraction: float = 0.5, seed: int = 0,
                max_retries: int = 200) -> CompositionSpace:
    """Randomly split the full pair grid into seen/unseen universes.

    Re-draws until every primitive appears in at least one seen pair
    (bounded retries). ``val_fraction`` is the share of unseen pairs
    included in the validation pair universe; the test universe is
    always the full seen+unseen set.
    """
    if not 0.0 < seen_fraction <= 1.0:
        raise ConfigError(f"seen_fraction must be in (0, 1], got {seen_fraction}")
    if not 0.0 <= val_fraction <= 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1], got {val_fraction}")
    n_a, n_o = len(attributes), len(objects)
    all_pairs = [(a, o) for a in range(n_a) for o in range(n_o)]
    n_seen = max(1, round(seen_fraction * len(all_pairs)))
    if n_seen < max(n_a, n_o):
        raise ConfigError(
            f"seen_fraction {seen_fraction} yields {n_seen} pairs, too few to cover "
            f"{n_a} attributes and {n_o} objects")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    for _ in range(max_retries):
        perm = rng.permutation(len(all_pairs))
        seen = sorted(all_pairs[i] for i in perm[:n_seen])
        if {a for a, _ in seen} == set(range(n_a)) and {o for _, o in seen} == set(range(n_o)):
            unseen = sorted(set(all_pairs) - set(seen))
            if not unseen:
                warnings.warn("seen_fraction leaves no unseen pairs; "
                              "generalization cannot be measured", stacklevel=2)
            n_val_unseen = round(val_fraction * len(unseen))
            val_unseen = sorted(unseen[i] for i in
                                rng.permutation(len(unseen))[:n_val_unseen])
            return CompositionSpace(
                attributes=list(attributes), objects=list(objects),
                seen_pairs=seen, unseen_pairs=unseen,
                test_pairs=seen + unseen, val_pairs=seen + val_unseen)
    raise ConfigError(f"could not cover every primitive in {max_retries} draws; "
                      f"raise seen_fraction")


@dataclass
class Dataset:
    """In-memory labeled feature records over a composition space."""

    space: CompositionSpace
    records: list[featfile.FeatureRecord]
    d: int
    n_tokens: int

    def split(self, name: str) -> list[featfile.FeatureRecord]:
        return [r for r in self.records if r.split == name]

    def validate(self) -> None:
        unseen = set(self.space.unseen_pairs)
        for r in self.records:
            if r.split == "train" and (r.attr, r.obj) in unseen:
                raise ConfigError(
                    f"train record {r.sample_id} carries unseen pair ({r.attr},{r.obj})")


def generate_synthetic(space: CompositionSpace, samples_per_pair: int = 20,
                       sigma_n: float = 0.1, seed: int = 0, d: int = 32,
                       n_tokens: int = 8, d_lat: int = 16,
                       eval_samples_per_pair: int = 5,
                       basis_std: float = 0.1,
                       noise_corr: float = 0.9,
                       style_rank: int | None = None) -> Dataset:
    """Fabricate a dataset: train rows for seen pairs, eval rows for the
    val/test pair universes. Deterministic under ``seed``."""
    if samples_per_pair < 1:
        raise ConfigError("samples_per_pair must be >= 1 (empty train set otherwise)")
    if eval_samples_per_pair < 1:
        raise ConfigError("eval_samples_per_pair must be >= 1")
    enc = SyntheticImageEncoder(space.n_attrs, space.n_objs, d=d, n_tokens=n_tokens,
                                d_lat=d_lat, sigma_n=sigma_n, seed=seed,
                                basis_std=basis_std, noise_corr=noise_corr,
                                style_rank=style_rank)
    records: list[featfile.FeatureRecord] = []
    next_id = 0

    def emit(pair, split, idx):
        nonlocal next_id
        f = enc.encode(pair[0], pair[1], idx)
        records.append(featfile.FeatureRecord(
            sample_id=next_id, attr=pair[0], obj=pair[1], split=split,
            tokens=f.tokens, pooled=f.pooled))
        next_id += 1

    for pair in space.seen_pairs:
        for r in range(samples_per_pair):
            emit(pair, "train", r)
    for pair in space.val_pairs:
        for r in range(eval_samples_per_pair):
            emit(pair, "val", VAL_IDX_OFFSET + r)
    for pair in space.test_pairs:
        for r in range(eval_samples_per_pair):
            emit(pair, "test", TEST_IDX_OFFSET + r)
    ds = Dataset(space=space, records=records, d=d, n_tokens=n_tokens)
    ds.validate()
    return ds


def quantize_dataset(ds: Dataset) -> None:
    """Snap features to f32-representable values in place.

    Applied before saving so that in-memory training and
    write-then-load training see bit-identical inputs.
    """
    for r in ds.records:
        r.tokens = r.tokens.astype(np.float32).astype(np.float64)
        r.pooled = r.pooled.astype(np.float32).astype(np.float64)


def save_dataset(path, ds: Dataset) -> None:
    quantize_dataset(ds)
    featfile.write_features(path, ds.records, ds.space.to_labels(),
                            d=ds.d, n_tokens=ds.n_tokens)


def load_dataset(path, expected_d: int | None = None,
                 expected_n_tokens: int | None = None) -> Dataset:
    records, labels, d, n_tokens = featfile.read_features(
        path, expected_d, expected_n_tokens)
    space = CompositionSpace.from_labels(labels)
    ds = Dataset(space=space, records=records, d=d, n_tokens=n_tokens)
    ds.validate()
    return ds
