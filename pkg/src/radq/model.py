"""Full detector: backbone -> pyramid token fusion -> query decoder -> heads."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, ReferenceBackbone
from .decoder import DecoderLayer, DecoderOutput, ObjectQuerySet, PredictionHeads
from .errors import ConfigError
from .nn import LayerNorm, prefixed
from .ptf import PyramidTokenFusion, TpeConfig
from .raddata import NUM_CLASSES
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    heads: int = 4
    layers: int = 3
    num_queries: int = 10
    num_classes: int = NUM_CLASSES
    tpe_alpha: float = 0.6
    d_pos: int = 0  # 0 means "use d_model"
    ffn_hidden: int = 64
    backbone_strides: tuple = (8, 2, 2)
    backbone_channels: tuple = (24, 32, 48)

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigError("need at least one decoder layer")
        if self.num_queries < 1:
            raise ConfigError("need at least one object query")
        if self.d_pos and (self.d_pos % 2 or self.d_pos > self.d_model):
            raise ConfigError("d_pos must be even and at most d_model")

    @property
    def effective_d_pos(self):
        return self.d_pos or self.d_model


class RadarDetector:
    def __init__(self, cfg, doppler_bins, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        tpe = TpeConfig(cfg.effective_d_pos, cfg.tpe_alpha)
        self.backbone = ReferenceBackbone(
            doppler_bins,
            BackboneConfig(cfg.backbone_strides, cfg.backbone_channels),
            rng,
        )
        self.fusion = PyramidTokenFusion(cfg.backbone_channels, cfg.d_model, tpe, rng)
        self.queries = ObjectQuerySet(cfg.num_queries, cfg.d_model, rng)
        self.layers = [
            DecoderLayer(cfg.d_model, cfg.heads, cfg.ffn_hidden, tpe, rng)
            for _ in range(cfg.layers)
        ]
        self.final_norm = LayerNorm(cfg.d_model)
        self.heads = PredictionHeads(cfg.d_model, cfg.num_classes, rng)

    def forward(self, cube, collect_attention=False):
        """cube: (R, A, D) log-magnitude array or Tensor -> DecoderOutput."""
        if not isinstance(cube, Tensor):
            cube = Tensor(np.asarray(cube, dtype=np.float64))
        pyramid = self.backbone(cube)
        memory = self.fusion(pyramid)
        ref_points = T.sigmoid(self.queries.ref_logits)
        q = self.queries.content
        logits_per_layer, boxes_per_layer, attn_per_layer = [], [], []
        for layer in self.layers:
            q, attn = layer(q, memory, ref_points)
            logits, boxes = self.heads(self.final_norm(q), self.queries.ref_logits)
            logits_per_layer.append(logits)
            boxes_per_layer.append(boxes)
            if collect_attention:
                attn_per_layer.append(attn)
        return DecoderOutput(logits_per_layer, boxes_per_layer, attn_per_layer, memory)

    __call__ = forward

    def parameters(self):
        children = {
            "backbone": self.backbone,
            "fusion": self.fusion,
            "queries": self.queries,
        }
        children.update({f"layer{i}": layer for i, layer in enumerate(self.layers)})
        children.update({"final_norm": self.final_norm, "heads": self.heads})
        return prefixed(children)
