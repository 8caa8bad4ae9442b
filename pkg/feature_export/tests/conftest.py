"""Shared toy-dataset factory: tiny PNGs plus split CSVs and a vocab."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

ATTRS = ["red", "green", "blue"]
OBJS = ["cube", "ball"]

# (attr, obj, split) per image; three distinct train pairs, one pair
# (blue, ball) held out of train so the labels sidecar gets an unseen list
ROWS = [
    ("red", "cube", "train"),
    ("red", "cube", "train"),
    ("green", "ball", "train"),
    ("green", "ball", "train"),
    ("blue", "cube", "train"),
    ("blue", "cube", "train"),
    ("red", "cube", "test"),
    ("green", "ball", "test"),
    ("blue", "ball", "test"),
]


def write_png(path: Path, seed: int, size: int = 48) -> None:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path)


@pytest.fixture
def png_factory():
    return write_png


@pytest.fixture
def toy_dataset(tmp_path):
    """Returns (images_dir, split_csv, vocab_json) for ROWS."""
    images = tmp_path / "images"
    images.mkdir()
    split = tmp_path / "split.csv"
    with open(split, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "attribute", "object", "split"])
        for i, (a, o, s) in enumerate(ROWS):
            name = f"img{i:03d}.png"
            write_png(images / name, seed=i)
            w.writerow([name, a, o, s])
    vocab = tmp_path / "vocab.json"
    vocab.write_text(json.dumps({"attributes": ATTRS, "objects": OBJS}))
    return images, split, vocab
