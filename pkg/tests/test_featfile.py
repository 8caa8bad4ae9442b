"""Feature-file format: round-trips, validation, malformed inputs."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaps import featfile as ff
from vaps.errors import FormatError


def _mk_records(rng, n, d, n_tokens, splits=("train", "val", "test")):
    recs = []
    for i in range(n):
        # f32-exact values: the format stores f32, so round-trips are
        # only bit-identical for values representable at that width
        tokens = rng.normal(size=(n_tokens, d)).astype(np.float32).astype(np.float64)
        pooled = tokens.mean(axis=0).astype(np.float32).astype(np.float64)
        recs.append(ff.FeatureRecord(
            sample_id=i, attr=i % 2, obj=i % 3, split=splits[i % len(splits)],
            tokens=tokens, pooled=pooled))
    return recs


LABELS = ff.LabelInfo(
    attributes=["red", "blue"],
    objects=["cat", "car", "cup"],
    seen_pairs=[(0, 0), (0, 1), (1, 0), (1, 2), (0, 2)],
    unseen_pairs=[(1, 1)],
)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    recs = _mk_records(rng, 100, d=7, n_tokens=4)
    p = tmp_path / "feats.feat"
    ff.write_features(p, recs, LABELS, d=7, n_tokens=4)
    loaded, labels, d, ntok = ff.read_features(p)
    assert (d, ntok, len(loaded)) == (7, 4, 100)
    assert labels.attributes == LABELS.attributes
    assert labels.seen_pairs == LABELS.seen_pairs
    # write what we read: the two files must be byte-identical
    p2 = tmp_path / "again.feat"
    ff.write_features(p2, loaded, labels, d=7, n_tokens=4)
    assert p.read_bytes() == p2.read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    p = tmp_path / "empty.feat"
    ff.write_features(p, [], LABELS, d=3, n_tokens=2)
    recs, _, d, ntok = ff.read_features(p)
    assert recs == [] and (d, ntok) == (3, 2)
    assert ff.validate_features(p).ok


def test_wrong_magic_rejected(tmp_path):
    p = tmp_path / "bad.feat"
    ff.write_features(p, [], LABELS, d=3, n_tokens=2)
    raw = bytearray(p.read_bytes())
    raw[:8] = b"NOTAFEAT"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        ff.read_features(p)


def test_wrong_version_rejected(tmp_path):
    p = tmp_path / "bad.feat"
    ff.write_features(p, [], LABELS, d=3, n_tokens=2)
    raw = bytearray(p.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        ff.read_features(p)


def test_truncated_payload_rejected(tmp_path):
    rng = np.random.default_rng(2)
    p = tmp_path / "trunc.feat"
    ff.write_features(p, _mk_records(rng, 5, 4, 2), LABELS, d=4, n_tokens=2)
    raw = p.read_bytes()
    p.write_bytes(raw[:-7])
    with pytest.raises(FormatError, match="payload"):
        ff.read_features(p)


def test_unknown_primitive_rejected(tmp_path):
    rng = np.random.default_rng(3)
    recs = _mk_records(rng, 1, 4, 2)
    recs[0].attr = 9
    p = tmp_path / "oob.feat"
    ff.write_features(p, recs, LABELS, d=4, n_tokens=2)
    with pytest.raises(FormatError, match="outside"):
        ff.read_features(p)


def test_missing_labels_sidecar(tmp_path):
    p = tmp_path / "nolabels.feat"
    ff.write_features(p, [], LABELS, d=3, n_tokens=2)
    ff.labels_path(p).unlink()
    with pytest.raises(FormatError, match="labels"):
        ff.read_features(p)


def test_validate_flags_train_sample_with_unseen_pair(tmp_path):
    rng = np.random.default_rng(4)
    recs = _mk_records(rng, 1, 4, 2, splits=("train",))
    recs[0].attr, recs[0].obj = 1, 1  # the unseen pair in LABELS
    p = tmp_path / "leak.feat"
    ff.write_features(p, recs, LABELS, d=4, n_tokens=2)
    rep = ff.validate_features(p)
    assert not rep.ok
    assert any("unseen pair" in e for e in rep.errors)


def test_validate_warns_on_non_mean_pooling(tmp_path):
    rng = np.random.default_rng(5)
    recs = _mk_records(rng, 2, 4, 2)
    recs[0].pooled = recs[0].tokens[0].copy()  # designated-token pooling
    p = tmp_path / "cls.feat"
    ff.write_features(p, recs, LABELS, d=4, n_tokens=2)
    rep = ff.validate_features(p)
    assert rep.ok  # warning, not error
    assert any("pooled" in w for w in rep.warnings)


def test_validate_flags_overlapping_pair_splits(tmp_path):
    labels = ff.LabelInfo(["a"], ["o"], seen_pairs=[(0, 0)], unseen_pairs=[(0, 0)])
    p = tmp_path / "overlap.feat"
    ff.write_features(p, [], labels, d=3, n_tokens=2)
    rep = ff.validate_features(p)
    assert any("both seen and unseen" in e for e in rep.errors)


def test_validate_reports_unreadable_file(tmp_path):
    p = tmp_path / "garbage.feat"
    p.write_bytes(b"\x00" * 11)
    rep = ff.validate_features(p)
    assert not rep.ok


def test_labels_json_shape(tmp_path):
    p = tmp_path / "x.feat"
    ff.write_features(p, [], LABELS, d=3, n_tokens=2)
    doc = json.loads(ff.labels_path(p).read_text())
    assert doc["attributes"] == ["red", "blue"]
    assert doc["pair_splits"]["unseen"] == [[1, 1]]


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 9), n_tokens=st.integers(1, 5), n=st.integers(0, 12),
       seed=st.integers(0, 2**31))
def test_round_trip_identity_property(tmp_path_factory, d, n_tokens, n, seed):
    rng = np.random.default_rng(seed)
    tmp = tmp_path_factory.mktemp("rt")
    labels = ff.LabelInfo(["a0", "a1"], ["o0", "o1", "o2"],
                          seen_pairs=[(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (1, 2)])
    recs = _mk_records(rng, n, d, n_tokens)
    p = tmp / "f.feat"
    ff.write_features(p, recs, labels, d=d, n_tokens=n_tokens)
    loaded, _, _, _ = ff.read_features(p)
    assert len(loaded) == n
    for a, b in zip(recs, loaded):
        assert (a.sample_id, a.attr, a.obj, a.split) == (b.sample_id, b.attr, b.obj, b.split)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.pooled, b.pooled)
