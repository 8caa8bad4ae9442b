"""Frozen image encoders emitting final-layer patch tokens.

Every encoder exposes ``encode(batch) -> (cls, patches)`` where batch is
a float32 (B, 3, S, S) tensor, cls is (B, d) and patches is (B, P, d),
plus ``name``/``version`` strings recorded in the export manifest.

The registry maps encoder names to factories so the CLI stays agnostic;
a pretrained backbone with on-disk weights would register the same way.
The built-in entry is a deterministically seeded vision transformer:
weights are random but frozen and identical on every run, which is what
the export tool needs for byte-reproducible output in an offline
environment.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image
from torch import nn

WEIGHTS_SEED = 20240501


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x):
        y = self.ln1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class SeededViT(nn.Module):
    """Tiny frozen ViT: conv patch embedding, CLS token, 2 blocks."""

    name = "seeded-vit-tiny"
    version = "1"

    def __init__(self, image_size: int = 32, patch: int = 8, width: int = 32,
                 depth: int = 2, heads: int = 4, seed: int = WEIGHTS_SEED):
        super().__init__()
        if image_size % patch != 0:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        torch.manual_seed(seed)
        n_patches = (image_size // patch) ** 2
        self.image_size = image_size
        self.width = width
        self.n_patches = n_patches
        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, n_patches + 1, width) * 0.02)
        self.blocks = nn.ModuleList(_Block(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)
        self.eval()
        self.requires_grad_(False)

    @torch.no_grad()
    def encode(self, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if batch.ndim != 4 or batch.shape[1:] != (3, self.image_size, self.image_size):
            raise ValueError(
                f"batch shape {tuple(batch.shape)} != (B, 3, {self.image_size}, "
                f"{self.image_size})")
        x = self.patch_embed(batch)              # (B, w, g, g)
        x = x.flatten(2).transpose(1, 2)         # (B, P, w)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        return x[:, 0], x[:, 1:]


REGISTRY = {
    "seeded-vit-tiny": SeededViT,
}

DEFAULT_ENCODER = "seeded-vit-tiny"


def build_encoder(name: str, image_size: int):
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown encoder {name!r}; "
                         f"available: {sorted(REGISTRY)}") from None
    # single-threaded inference keeps reduction order, hence bytes, stable
    torch.set_num_threads(1)
    return factory(image_size=image_size)


def load_image(path, image_size: int) -> np.ndarray:
    """Decode, resize, and scale to a (3, S, S) float32 array in [-1, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((image_size, image_size),
                                        Image.Resampling.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return np.transpose((arr - 0.5) / 0.5, (2, 0, 1))
