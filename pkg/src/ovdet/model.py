"""Full detector: backbone, collaboration encoder, text-guided decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, ImageBatch, MultiScaleFeatures
from .decoder import (DetectionSet, LayerOutput, QuerySet, TextGuidedDecoder, decode_detections,
                      decoder_forward, select_queries)
from .encoder import CollaborationEncoder, EnhancedState
from .nn import Module
from .text import ClassEmbeddingBank


@dataclass
class ModelConfig:
    channels: int = 64
    text_dim: int = 64
    d_h: int = 64
    n_layers: int = 3
    n_queries: int = 30
    head_alpha: float = 5.0
    head_beta: float = -2.0
    enable_tg_fe: bool = True
    enable_vg_tr: bool = True
    enable_tg_qe: bool = True
    enable_gate: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                if f.type in ("bool", bool) and isinstance(v, str):
                    v = v.lower() in ("1", "true", "yes")
                elif f.type in ("int", int):
                    v = int(v)
                elif f.type in ("float", float):
                    v = float(v)
                kwargs[f.name] = v
        return cls(**kwargs)


@dataclass
class ModelOutput:
    state: EnhancedState
    queries: QuerySet
    encoder_output: LayerOutput
    layers: List[LayerOutput]

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]

    def all_outputs(self) -> List[LayerOutput]:
        """Decoder layers followed by the encoder proposals (auxiliary supervision)."""
        return self.layers + [self.encoder_output]


class Detector(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, cfg.channels)
        self.encoder = CollaborationEncoder(rng, cfg.channels, cfg.text_dim, cfg.d_h,
                                            enable_tg_fe=cfg.enable_tg_fe, enable_vg_tr=cfg.enable_vg_tr,
                                            enable_gate=cfg.enable_gate)
        self.decoder = TextGuidedDecoder(rng, cfg.channels, cfg.text_dim, cfg.d_h, cfg.n_layers,
                                         cfg.n_queries, cfg.head_alpha, cfg.head_beta,
                                         enable_tg_qe=cfg.enable_tg_qe, enable_gate=cfg.enable_gate)

    def forward_features(self, feats: MultiScaleFeatures, text: ClassEmbeddingBank,
                         image_size) -> ModelOutput:
        state = self.encoder(feats, text)
        anchors = feats.anchors(*image_size)
        k = min(self.decoder.n_queries, feats.num_tokens)
        queries = select_queries(state, self.decoder.head, k, self.decoder.enc_box_head, anchors)
        enc_out = LayerOutput(queries.reference_boxes, queries.scores)
        layers = decoder_forward(state, queries, self.decoder, anchors)
        return ModelOutput(state, queries, enc_out, layers)

    def __call__(self, batch: ImageBatch, text: ClassEmbeddingBank) -> ModelOutput:
        return self.forward_features(self.backbone(batch), text, batch.size)

    def predict(self, batch: ImageBatch, text: ClassEmbeddingBank) -> List[DetectionSet]:
        with ad.no_grad():
            out = self(batch, text)
        return decode_detections(out.final, out.state.text)
