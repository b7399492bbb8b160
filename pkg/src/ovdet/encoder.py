"""Image-text collaboration encoder.

Visual tokens first receive class embeddings through gated cross-attention
(text-guided feature enhancement), pass through a pointwise mixing block, and
the enhanced tokens of all scales then refine the class embeddings through a
second cross-attention (visual-guided text refinement).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MultiScaleFeatures
from .nn import FeedForward, Module, uniform_init
from .text import ClassEmbeddingBank


class CrossAttentionProjections(Module):
    """Single-head projections: queries ``q_dim -> d_h``, keys ``kv_dim -> d_h``, values ``kv_dim -> out_dim``."""

    def __init__(self, rng: np.random.Generator, q_dim: int, kv_dim: int, out_dim: int, d_h: int):
        self.W_q = uniform_init(rng, q_dim, (q_dim, d_h))
        self.W_k = uniform_init(rng, kv_dim, (kv_dim, d_h))
        self.W_v = uniform_init(rng, kv_dim, (kv_dim, out_dim))

    def zero_values(self) -> "CrossAttentionProjections":
        """Start the injection branch as an exact identity."""
        self.W_v.data = np.zeros(self.W_v.shape)
        return self

    @property
    def d_h(self) -> int:
        return self.W_q.shape[1]

    def logits(self, queries, keys) -> Tensor:
        q = ad.matmul(queries, self.W_q)
        k = ad.matmul(keys, self.W_k)
        return ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_h))


class FusionParams(Module):
    """Text-to-image set (shared by every scale) and image-to-text set."""

    def __init__(self, rng: np.random.Generator, channels: int, text_dim: int, d_h: Optional[int] = None):
        d_h = d_h or text_dim
        self.tg_fe = CrossAttentionProjections(rng, channels, text_dim, channels, d_h).zero_values()
        self.vg_tr = CrossAttentionProjections(rng, text_dim, channels, text_dim, d_h).zero_values()


def gated_injection(x, logits: Tensor, values: Tensor, mask: np.ndarray,
                    gate: bool = True) -> Tuple[Tensor, Tensor]:
    """``x + softmax(logits) @ values * sigmoid(max_valid(logits))``.

    Returns the updated tokens and the per-token gate (ones when ``gate`` is off).
    """
    attn = ad.softmax_rows(logits, mask)
    injected = ad.matmul(attn, values)
    if gate:
        g = ad.sigmoid(ad.max_(logits, axis=-1, mask=mask))
        injected = injected * ad.reshape(g, g.shape + (1,))
    else:
        g = Tensor(np.ones(logits.shape[:-1]))
    return ad.add(x, injected), g


def tg_fe(level_tokens: Tensor, text: ClassEmbeddingBank, params: FusionParams,
          gate: bool = True) -> Tuple[Tensor, Tensor]:
    """Text-guided enhancement of one level's ``[B, HW, C]`` tokens; returns (tokens, gate)."""
    proj = params.tg_fe if isinstance(params, FusionParams) else params
    if text.n_valid == 0:
        raise ad.DegenerateMaskError("text bank has no valid class slots")
    logits = proj.logits(level_tokens, text.embeddings)
    values = ad.matmul(text.embeddings, proj.W_v)
    return gated_injection(level_tokens, logits, values, text.valid_mask, gate)


def vg_tr(text: ClassEmbeddingBank, enhanced: MultiScaleFeatures, params: FusionParams) -> ClassEmbeddingBank:
    """Refine class embeddings with the enhanced tokens of all levels; padding rows pass through."""
    feats = enhanced.flat()
    if feats.shape[1] == 0:
        raise ValueError("no visual tokens to refine text with")
    proj = params.vg_tr
    logits = proj.logits(text.embeddings, feats)  # [B, S, M]
    update = ad.matmul(ad.softmax_rows(logits), ad.matmul(feats, proj.W_v))
    t = text.embeddings
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    refined = ad.where(text.valid_mask[None, :, None], ad.add(t, update), t)
    return text.with_embeddings(refined)


@dataclass
class EnhancedState:
    features: MultiScaleFeatures
    text: ClassEmbeddingBank
    gate_maps: List[Optional[Tensor]]


class CollaborationEncoder(Module):
    def __init__(self, rng: np.random.Generator, channels: int = 64, text_dim: int = 64,
                 d_h: Optional[int] = None, n_levels: int = 3, enable_tg_fe: bool = True,
                 enable_vg_tr: bool = True, enable_gate: bool = True):
        self.fusion = FusionParams(rng, channels, text_dim, d_h)
        self.mixers = [FeedForward(rng, channels, 2 * channels) for _ in range(n_levels)]
        self.enable_tg_fe = enable_tg_fe
        self.enable_vg_tr = enable_vg_tr
        self.enable_gate = enable_gate

    def __call__(self, feats: MultiScaleFeatures, text: ClassEmbeddingBank) -> EnhancedState:
        return encoder_forward(feats, text, self)


def encoder_forward(feats: MultiScaleFeatures, text: ClassEmbeddingBank,
                    params: CollaborationEncoder) -> EnhancedState:
    tokens, gates = [], []
    for level, mixer in zip(feats.levels, params.mixers):
        x = level.tokens
        g = None
        if params.enable_tg_fe:
            x, g = tg_fe(x, text, params.fusion, gate=params.enable_gate)
        tokens.append(mixer(x))
        gates.append(g)
    enhanced = feats.replace_tokens(tokens)
    refined = vg_tr(text, enhanced, params.fusion) if params.enable_vg_tr else text
    return EnhancedState(enhanced, refined, gates)
