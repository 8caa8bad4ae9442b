"""Byte-level checks of the writer against the documented layout."""

import struct

import numpy as np
import pytest

from feature_export.featwriter import (ExportRecord, labels_path, write_feat,
                                       write_labels)


def test_empty_file_is_exactly_one_header(tmp_path):
    out = tmp_path / "e.feat"
    write_feat(out, [], d=4, n_tokens=2)
    raw = out.read_bytes()
    assert raw == struct.pack("<8sIIIQ", b"VAPSFEAT", 1, 4, 2, 0)


def test_single_record_bytes_match_hand_packed_layout(tmp_path):
    tokens = np.arange(6, dtype=np.float32).reshape(2, 3)
    pooled = np.array([9.0, 8.0, 7.0], dtype=np.float32)
    rec = ExportRecord(sample_id=5, attr=1, obj=2, split="test",
                       tokens=tokens, pooled=pooled)
    out = tmp_path / "one.feat"
    write_feat(out, [rec], d=3, n_tokens=2)
    expected = (struct.pack("<8sIIIQ", b"VAPSFEAT", 1, 3, 2, 1)
                + struct.pack("<QIIB", 5, 1, 2, 2)
                + tokens.tobytes() + pooled.tobytes())
    assert out.read_bytes() == expected


def test_shape_mismatch_is_rejected(tmp_path):
    rec = ExportRecord(sample_id=0, attr=0, obj=0, split="train",
                       tokens=np.zeros((2, 3), np.float32),
                       pooled=np.zeros(4, np.float32))
    with pytest.raises(ValueError, match="shape"):
        write_feat(tmp_path / "bad.feat", [rec], d=3, n_tokens=2)


def test_labels_sidecar_sits_next_to_the_binary(tmp_path):
    feat = tmp_path / "x.feat"
    out = write_labels(feat, ["a"], ["o"], [(0, 0)], [])
    assert out == tmp_path / "x.labels.json"
    assert out == labels_path(feat)
    assert out.read_text().endswith("\n")
