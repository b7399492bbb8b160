"""Toy multi-scale image encoder producing stride 8/16/32 token maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module

STRIDES = (8, 16, 32)


@dataclass
class ImageBatch:
    """Pixels ``[B, 3, H, W]`` in [0, 1] with per-image metadata dicts."""

    pixels: Tensor
    meta: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if not isinstance(self.pixels, Tensor):
            self.pixels = Tensor(self.pixels)
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] pixels, got {self.pixels.shape}")
        h, w = self.pixels.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} is not divisible by 32")

    @classmethod
    def from_hwc(cls, images: Sequence[np.ndarray], meta: Optional[List[dict]] = None) -> "ImageBatch":
        """Stack uint8 or float ``H x W x 3`` arrays."""
        arrs = []
        for im in images:
            im = np.asarray(im)
            im = im.astype(np.float64) / 255.0 if im.dtype == np.uint8 else im.astype(np.float64)
            arrs.append(np.transpose(im, (2, 0, 1)))
        return cls(Tensor(np.stack(arrs)), meta or [{} for _ in arrs])

    @property
    def size(self):
        return self.pixels.shape[2], self.pixels.shape[3]


@dataclass
class FeatureLevel:
    tokens: Tensor  # [B, H*W, C]
    height: int
    width: int
    stride: int

    def __post_init__(self):
        if self.tokens.shape[1] != self.height * self.width:
            raise ValueError("token count does not match the level grid")


@dataclass
class MultiScaleFeatures:
    levels: List[FeatureLevel]

    def __post_init__(self):
        if len({lvl.tokens.shape[-1] for lvl in self.levels}) > 1:
            raise ValueError("levels must share one channel width")

    @property
    def channels(self) -> int:
        return self.levels[0].tokens.shape[-1]

    @property
    def num_tokens(self) -> int:
        return sum(lvl.height * lvl.width for lvl in self.levels)

    def flat(self) -> Tensor:
        """All levels concatenated along the token axis (F3 first)."""
        return ad.concat([lvl.tokens for lvl in self.levels], axis=1)

    def replace_tokens(self, tokens: Sequence[Tensor]) -> "MultiScaleFeatures":
        return MultiScaleFeatures([FeatureLevel(t, l.height, l.width, l.stride)
                                   for t, l in zip(tokens, self.levels)])

    def anchors(self, image_h: int, image_w: int) -> np.ndarray:
        """Normalised cxcywh anchor per token: the cell centre and one cell of size."""
        out = []
        for lvl in self.levels:
            ys, xs = np.meshgrid(np.arange(lvl.height), np.arange(lvl.width), indexing="ij")
            cx = (xs.reshape(-1) + 0.5) * lvl.stride / image_w
            cy = (ys.reshape(-1) + 0.5) * lvl.stride / image_h
            w = np.full_like(cx, lvl.stride / image_w)
            h = np.full_like(cy, lvl.stride / image_h)
            out.append(np.stack([cx, cy, w, h], axis=1))
        return np.concatenate(out, axis=0)


def patchify(pixels: Tensor, patch: int) -> Tensor:
    """``[B, 3, H, W]`` -> ``[B, (H/p)(W/p), 3p^2]`` non-overlapping patches, row-major."""
    b, c, h, w = pixels.shape
    gh, gw = h // patch, w // patch
    x = ad.reshape(pixels, (b, c, gh, patch, gw, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, gh * gw, c * patch * patch))


class PatchEmbed(Module):
    def __init__(self, rng: np.random.Generator, patch: int, channels: int):
        self.patch = patch
        self.proj = Linear(rng, 3 * patch * patch, channels)
        self.norm = LayerNorm(channels)

    def __call__(self, pixels: Tensor) -> Tensor:
        return self.norm(ad.silu(self.proj(patchify(pixels, self.patch))))


class Backbone(Module):
    """One patch embedding per stride, each applied to the raw image."""

    def __init__(self, rng: np.random.Generator, channels: int = 64, strides=STRIDES):
        self.strides = tuple(strides)
        self.stems = [PatchEmbed(rng, s, channels) for s in self.strides]

    def __call__(self, batch: ImageBatch) -> MultiScaleFeatures:
        return encode_image(batch, self)


def encode_image(batch: ImageBatch, params: Backbone) -> MultiScaleFeatures:
    h, w = batch.size
    if h % 32 or w % 32:
        raise ValueError(f"image size {h}x{w} is not divisible by 32")
    levels = []
    for stride, stem in zip(params.strides, params.stems):
        levels.append(FeatureLevel(stem(batch.pixels), h // stride, w // stride, stride))
    return MultiScaleFeatures(levels)
