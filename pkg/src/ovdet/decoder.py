"""Text-guided decoder: similarity-based query selection, query enhancement,
cross-attention layers with iterative box refinement, and the contrastive head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MultiScaleFeatures
from .encoder import CrossAttentionProjections, EnhancedState, gated_injection
from .nn import MLP, FeedForward, LayerNorm, Linear, Module
from .text import ClassEmbeddingBank


class CapacityError(ValueError):
    pass


class ContrastiveHead(Module):
    """Scaled, shifted cosine similarity between projected queries and class embeddings."""

    def __init__(self, rng: np.random.Generator, channels: int, text_dim: int,
                 alpha: float = 5.0, beta: float = -2.0):
        self.proj = Linear(rng, channels, text_dim)
        self.alpha = ad.parameter(np.array(alpha))
        self.beta = ad.parameter(np.array(beta))


def contrastive_scores(queries: Tensor, text: ClassEmbeddingBank, head: ContrastiveHead) -> Tensor:
    """Similarity logits ``[B, N, S]``; padding slots are filled with ``MASK_FILL``."""
    v = ad.l2_normalize_rows(head.proj(queries))
    t = ad.l2_normalize_rows(text.embeddings)
    cos = ad.matmul(v, t.swapaxes(-1, -2))
    s = cos * head.alpha + head.beta
    return ad.where(text.valid_mask, s, ad.MASK_FILL)


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.clip(x, eps, 1 - eps)
    return np.log(x / (1 - x))


@dataclass
class QuerySet:
    content: Tensor              # [B, N, C]
    reference_logits: Tensor     # [B, N, 4], pre-sigmoid cxcywh
    token_index: np.ndarray      # [B, N] flat token ids of the selected tokens
    scores: Tensor               # [B, N, S] similarity logits of the selected tokens

    @property
    def reference_boxes(self) -> Tensor:
        return ad.sigmoid(self.reference_logits)


@dataclass
class LayerOutput:
    boxes: Tensor    # [B, N, 4] normalised cxcywh
    logits: Tensor   # [B, N, S]
    gate: Optional[Tensor] = None  # [B, N] query gate of this layer, when TG-QE runs


@dataclass
class DetectionSet:
    """Decoded predictions for one image; ``scores`` has one column per valid slot."""

    boxes: np.ndarray
    scores: np.ndarray
    class_ids: List[int]
    class_names: List[Optional[str]]


def select_queries(enhanced: EnhancedState, head: ContrastiveHead, k: int, box_head: MLP,
                   anchors: np.ndarray) -> QuerySet:
    """Top-``k`` tokens per image by their best similarity to any valid class slot.

    Ties keep the lower flat token index.  Reference boxes are the token
    anchors refined by ``box_head`` in logit space.
    """
    tokens = enhanced.features.flat()
    b, m, _ = tokens.shape
    if k > m:
        raise CapacityError(f"requested {k} queries from {m} tokens")
    logits = contrastive_scores(tokens, enhanced.text, head)
    best = logits.data.max(axis=-1)
    order = np.argsort(-best, axis=1, kind="stable")[:, :k]
    content = ad.gather_rows(tokens, order)
    ref = ad.add(Tensor(inverse_sigmoid(anchors[order])), box_head(content))
    return QuerySet(content, ref, order, ad.gather_rows(logits, order))


def tg_qe(queries: Tensor, text: ClassEmbeddingBank, proj: CrossAttentionProjections,
          gate: bool = True) -> Tuple[Tensor, Tensor]:
    """Gated injection of class embeddings into object queries; returns (queries, gate)."""
    if text.n_valid == 0:
        raise ad.DegenerateMaskError("text bank has no valid class slots")
    logits = proj.logits(queries, text.embeddings)
    values = ad.matmul(text.embeddings, proj.W_v)
    return gated_injection(queries, logits, values, text.valid_mask, gate)


def box_sinusoid(boxes: Tensor, n_freq: int) -> Tensor:
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    x = ad.reshape(boxes, boxes.shape + (1,)) * freqs
    feats = ad.concat([ad.sin(x), ad.cos(x)], axis=-1)
    return ad.reshape(feats, boxes.shape[:-1] + (boxes.shape[-1] * 2 * n_freq,))


class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.q_proj = Linear(rng, channels, channels, bias=False)
        self.k_proj = Linear(rng, channels, channels, bias=False)
        self.v_proj = Linear(rng, channels, channels, bias=False)
        self.out_proj = Linear(rng, channels, channels)
        self.norm = LayerNorm(channels)
        self.ffn = FeedForward(rng, channels, 2 * channels)
        self.box_head = MLP(rng, (channels, channels, 4))
        zero_last(self.box_head)


def zero_last(mlp: MLP) -> None:
    last = mlp.layers[-1]
    last.weight.data = np.zeros(last.weight.shape)
    last.bias.data = np.zeros(last.bias.shape)


class TextGuidedDecoder(Module):
    def __init__(self, rng: np.random.Generator, channels: int = 64, text_dim: int = 64,
                 d_h: Optional[int] = None, n_layers: int = 3, n_queries: int = 30,
                 alpha: float = 5.0, beta: float = -2.0, n_freq: int = 8,
                 enable_tg_qe: bool = True, enable_gate: bool = True):
        self.head = ContrastiveHead(rng, channels, text_dim, alpha, beta)
        self.enc_box_head = MLP(rng, (channels, channels, 4))
        zero_last(self.enc_box_head)
        self.tg_qe = CrossAttentionProjections(rng, channels, text_dim, channels, d_h or text_dim).zero_values()
        self.pos_head = Linear(rng, 4 * 2 * n_freq, channels)
        self.layers = [DecoderLayer(rng, channels) for _ in range(n_layers)]
        self.n_queries = n_queries
        self.n_freq = n_freq
        self.enable_tg_qe = enable_tg_qe
        self.enable_gate = enable_gate


def decoder_forward(enhanced: EnhancedState, queries: QuerySet, params: TextGuidedDecoder,
                    anchors: np.ndarray, n_layers: Optional[int] = None) -> List[LayerOutput]:
    """Run the decoder stack; returns one output per layer (the last is final)."""
    n_layers = len(params.layers) if n_layers is None else n_layers
    if n_layers < 1:
        raise ValueError("decoder needs at least one layer")
    tokens = enhanced.features.flat()
    text = enhanced.text
    key_pos = params.pos_head(box_sinusoid(Tensor(anchors), params.n_freq))
    keys_in = ad.add(tokens, key_pos)
    q, ref_logit = queries.content, queries.reference_logits
    outputs = []
    for layer in params.layers[:n_layers]:
        gate = None
        if params.enable_tg_qe:
            q, gate = tg_qe(q, text, params.tg_qe, gate=params.enable_gate)
        ref = ad.sigmoid(ref_logit)
        q_pos = params.pos_head(box_sinusoid(ref, params.n_freq))
        logits = ad.matmul(layer.q_proj(ad.add(q, q_pos)), layer.k_proj(keys_in).swapaxes(-1, -2))
        attn = ad.softmax_rows(logits * (1.0 / np.sqrt(q.shape[-1])))
        q = layer.norm(ad.add(q, layer.out_proj(ad.matmul(attn, layer.v_proj(tokens)))))
        q = layer.ffn(q)
        ref_logit = ad.add(ref_logit, layer.box_head(q))
        outputs.append(LayerOutput(ad.sigmoid(ref_logit), contrastive_scores(q, text, params.head), gate))
    return outputs


def decode_detections(output: LayerOutput, text: ClassEmbeddingBank) -> List[DetectionSet]:
    """Convert a layer output to per-image detection sets, dropping padding slots."""
    valid = np.flatnonzero(text.valid_mask)
    probs = 1.0 / (1.0 + np.exp(-output.logits.data[..., valid]))
    ids = [text.slot_to_class[s] for s in valid]
    names = [text.names[s] if text.names else None for s in valid]
    return [DetectionSet(output.boxes.data[i].copy(), probs[i], ids, names)
            for i in range(output.boxes.shape[0])]
