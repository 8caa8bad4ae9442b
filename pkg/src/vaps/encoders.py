"""Frozen feature providers.

Two encoders stand in for a large pretrained vision-language model:

* :class:`SyntheticImageEncoder` fabricates visual features directly in
  feature space from attribute/object latent bases. No pixels exist.
* :class:`FrozenTextEncoder` maps prompt token sequences to text
  features through a frozen random projection. Its weights never train,
  but gradients flow through it to the input tokens.

Both are pure functions of their seed; training must leave them
bit-identical (see :func:`params_hash`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import featfile
from . import numcore as nc
from .errors import ShapeError

# Seed-stream tags: each independent random draw gets its own lane so
# adding a new consumer never shifts existing streams.
_TAG_ATTR_BASIS = 101
_TAG_OBJ_BASIS = 102
_TAG_MIXING = 103
_TAG_NOISE = 104
_TAG_STYLE = 105
_TAG_TEXT_PROJ = 201


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass(frozen=True)
class ImageFeatures:
    """Visual tokens plus their pooled summary for one image."""

    sample_id: int
    tokens: np.ndarray  # (n_tokens, d)
    pooled: np.ndarray  # (d,)

    @classmethod
    def from_tokens(cls, sample_id: int, tokens: np.ndarray) -> "ImageFeatures":
        """Pool by arithmetic mean over token rows (the house rule)."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ShapeError("tokens must be a (n_tokens, d) matrix")
        return cls(sample_id=sample_id, tokens=tokens, pooled=tokens.mean(axis=0))


class SyntheticImageEncoder:
    """Deterministic feature fabric over an (attribute, object) grid.

    tokens[t] = (attr_basis[a] + obj_basis[o]) @ mixing[t] + sigma_n * noise
    with per-sample Gaussian noise drawn from a stream keyed by
    (seed, a, o, sample_idx), so the same request always produces
    bit-identical features.

    The noise splits its variance: a noise_corr fraction comes from a
    style vector shared by every token of the sample, the rest is iid
    per token. The style vector lives in a fixed style_rank-dimensional
    subspace of the content span (the image of the mean mixing map,
    defaulting to three quarters of it), so instance variation is
    entangled with the directions that carry the labels. Real backbone
    features behave the same way: lighting and pose move all patches of
    one image together, along feature directions that also encode what
    the image shows. A static prompt cannot ignore those directions
    without losing label signal; an image-conditioned prompt can read
    the style coordinates and compensate per sample.
    """

    def __init__(self, n_attrs: int, n_objs: int, d: int, n_tokens: int,
                 d_lat: int = 16, sigma_n: float = 0.1, seed: int = 0,
                 basis_std: float = 0.1, noise_corr: float = 0.9,
                 style_rank: int | None = None):
        if min(n_attrs, n_objs, d, n_tokens, d_lat) < 1:
            raise ShapeError("all encoder dimensions must be positive")
        if sigma_n < 0:
            raise ShapeError("sigma_n must be nonnegative")
        if basis_std <= 0:
            raise ShapeError("basis_std must be positive")
        if not 0.0 <= noise_corr <= 1.0:
            raise ShapeError("noise_corr must lie in [0, 1]")
        if style_rank is None:
            # three quarters of the content directions carry style: wide
            # enough that prompts cannot simply avoid them
            style_rank = max(1, round(0.75 * min(d_lat, d)))
        if not 1 <= style_rank <= min(d_lat, d):
            raise ShapeError(
                f"style_rank must lie in [1, min(d_lat, d)], got {style_rank}")
        self.n_attrs = n_attrs
        self.n_objs = n_objs
        self.d = d
        self.n_tokens = n_tokens
        self.d_lat = d_lat
        self.sigma_n = float(sigma_n)
        self.seed = int(seed)
        self.basis_std = float(basis_std)
        self.noise_corr = float(noise_corr)
        self.style_rank = int(style_rank)
        self.attr_basis = _rng(seed, _TAG_ATTR_BASIS).normal(
            0.0, basis_std, (n_attrs, d_lat))
        self.obj_basis = _rng(seed, _TAG_OBJ_BASIS).normal(
            0.0, basis_std, (n_objs, d_lat))
        self.mixing = _rng(seed, _TAG_MIXING).normal(
            0.0, 1.0 / np.sqrt(d_lat), (n_tokens, d_lat, d))
        # Orthonormal basis of a random style_rank-subspace of the
        # content span, scaled so E||z @ style_basis||^2 = d matches the
        # energy of a standard normal in R^d.
        dirs = _rng(seed, _TAG_STYLE).normal(0.0, 1.0, (style_rank, d_lat))
        q, _ = np.linalg.qr((dirs @ self.mixing.mean(axis=0)).T)
        self.style_basis = q.T * np.sqrt(d / style_rank)

    def encode(self, attr: int, obj: int, sample_idx: int) -> ImageFeatures:
        if not 0 <= attr < self.n_attrs:
            raise IndexError(f"attribute index {attr} out of range")
        if not 0 <= obj < self.n_objs:
            raise IndexError(f"object index {obj} out of range")
        lat = self.attr_basis[attr] + self.obj_basis[obj]
        tokens = np.stack([lat @ self.mixing[t] for t in range(self.n_tokens)])
        if self.sigma_n > 0.0:
            rng = _rng(self.seed, _TAG_NOISE, attr, obj, sample_idx)
            z = rng.normal(0.0, 1.0, self.style_rank)
            local = rng.normal(0.0, 1.0, (self.n_tokens, self.d))
            noise = (np.sqrt(self.noise_corr) * (z @ self.style_basis)[None, :]
                     + np.sqrt(1.0 - self.noise_corr) * local)
            tokens = tokens + self.sigma_n * noise
        return ImageFeatures.from_tokens(sample_idx, tokens)

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.attr_basis, self.obj_basis, self.mixing,
                    self.style_basis):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class FrozenTextEncoder:
    """Frozen projection + tanh over mean-pooled prompt tokens.

    f_t = tanh(mean_pool(tokens) @ projection). The projection is a
    plain array, never registered with any optimizer; each call wraps it
    in a fresh non-trainable graph constant so gradients reach only the
    token inputs. Mean pooling makes the encoding order-invariant,
    which is an accepted property of this stub.
    """

    def __init__(self, d_tok: int, d: int, seq_len: int, seed: int = 0):
        if min(d_tok, d, seq_len) < 1:
            raise ShapeError("all text-encoder dimensions must be positive")
        self.d_tok = d_tok
        self.d = d
        self.seq_len = seq_len
        self.projection = _rng(seed, _TAG_TEXT_PROJ).normal(
            0.0, 1.0 / np.sqrt(d_tok), (d_tok, d))

    def encode_text(self, token_sequence: nc.Value) -> nc.Value:
        """(seq_len, d_tok) token matrix -> (d,) text feature."""
        if token_sequence.shape != (self.seq_len, self.d_tok):
            raise ShapeError(
                f"token sequence shape {token_sequence.shape} != "
                f"({self.seq_len}, {self.d_tok})")
        pooled = nc.mean_axis(token_sequence, 0)
        return nc.tanh(nc.matmul(pooled, nc.constant(self.projection)))

    def encode_pooled_rows(self, pooled_rows: nc.Value) -> nc.Value:
        """Batched form: rows already mean-pooled, (n, d_tok) -> (n, d)."""
        if pooled_rows.data.ndim != 2 or pooled_rows.shape[1] != self.d_tok:
            raise ShapeError(f"pooled rows must be (n, {self.d_tok})")
        return nc.tanh(nc.matmul(pooled_rows, nc.constant(self.projection)))

    def params_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.projection).tobytes()).hexdigest()


def load_features(path, expected_d: int | None = None,
                  expected_n_tokens: int | None = None):
    """Read a feature file into (records, labels, d, n_tokens).

    The stored pooled vector is trusted as-is: externally produced files
    may pool by a rule other than the token mean.
    """
    return featfile.read_features(path, expected_d, expected_n_tokens)
