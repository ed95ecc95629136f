"""Conditional query decoder: learnable queries with reference points,
pre-norm self/cross-attention layers, and the class/box prediction heads.

Cross-attention conditions each query on its reference point: the query's
positional term is a learned gate on the sinusoidal encoding of the point,
and memory keys carry their fusion-time positional encodings. Box centers
for (range, azimuth) are regressed as offsets relative to the reference
point through a sigmoid; Doppler center and all sizes are absolute.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import raddata
from . import tensor as T
from .errors import ConfigError
from .nn import FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, prefixed
from .ptf import encode_positions
from .tensor import Tensor


def _logit(p):
    return np.log(p / (1.0 - p))


def _grid_points(n):
    """n points spreading over the unit square on a near-square grid."""
    rows = max(1, int(math.floor(math.sqrt(n))))
    cols = math.ceil(n / rows)
    pts = [
        ((i + 0.5) / rows, (j + 0.5) / cols)
        for i in range(rows)
        for j in range(cols)
    ]
    return np.array(pts[:n])


class ObjectQuerySet:
    """M learnable content embeddings plus M learnable 2-D reference logits.

    Reference points start on a regular grid so the conditional attention
    windows cover the whole range-azimuth plane before training.
    """

    def __init__(self, num_queries, d_model, rng):
        if num_queries < 1:
            raise ConfigError("need at least one object query")
        self.content = Tensor(rng.normal(0.0, 0.02, size=(num_queries, d_model)),
                              requires_grad=True)
        self.ref_logits = Tensor(_logit(_grid_points(num_queries)), requires_grad=True)

    @property
    def reference_points(self):
        """Sigmoid of the logits: (range, azimuth) in (0, 1), detached."""
        return 1.0 / (1.0 + np.exp(-self.ref_logits.data))

    def parameters(self):
        return {"content": self.content, "ref_logits": self.ref_logits}


def conditional_positional_query(ref_points, feat, gate, tpe):
    """p_q = gate(feat) ⊙ sincos(ref_points): (M, d_pos), differentiable."""
    return T.mul(gate(feat), encode_positions(ref_points, tpe))


class DecoderLayer:
    def __init__(self, d_model, heads, ffn_hidden, tpe, rng):
        self.d_model = d_model
        self.tpe = tpe
        self.norm_self = LayerNorm(d_model)
        self.attn_self = MultiHeadAttention(d_model, heads, rng)
        self.norm_cross = LayerNorm(d_model)
        self.pos_gate = Linear(d_model, tpe.d_pos, rng)
        self.attn_cross = MultiHeadAttention(d_model, heads, rng)
        self.norm_ffn = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_hidden, rng)
        # Position-locked start: unit gate makes p_q = sincos(s) exactly and
        # identity q/k projections preserve the encoding dot products, so
        # cross-attention begins as a window around each reference point.
        # Identity v/o keeps the attended mixture of token encodings intact
        # in the query state, where the box head can decode it linearly.
        self.pos_gate.w.data[:] = 0.0
        self.pos_gate.b.data[:] = 1.0
        for mat in (self.attn_cross.wq, self.attn_cross.wk,
                    self.attn_cross.wv, self.attn_cross.wo):
            mat.data[:] = np.eye(d_model)
        # Self-attention and FFN start silent so the early query state is a
        # clean sum of attended site features; both branches grow as needed.
        self.attn_self.wo.data[:] = 0.0
        self.ffn.fc2.w.data[:] = 0.0

    def __call__(self, q, memory, ref_points):
        """q: (M, D); memory: TokenMemory; ref_points: (M, 2) Tensor in (0,1)."""
        x = self.norm_self(q)
        q = q + self.attn_self(x, x, x)

        x = self.norm_cross(q)
        pq = conditional_positional_query(ref_points, x, self.pos_gate, self.tpe)
        if self.tpe.d_pos < self.d_model:
            pad = Tensor(np.zeros((pq.shape[0], self.d_model - self.tpe.d_pos)))
            pq = T.concat([pq, pad], axis=1)
        keys = memory.tokens + Tensor(memory.pos)
        out, weights = self.attn_cross(x + pq, keys, memory.tokens, return_weights=True)
        q = q + out

        x = self.norm_ffn(q)
        q = q + self.ffn(x)
        return q, weights.mean(axis=0)  # (M, N) head-averaged

    def parameters(self):
        return prefixed({
            "norm_self": self.norm_self,
            "attn_self": self.attn_self,
            "norm_cross": self.norm_cross,
            "pos_gate": self.pos_gate,
            "attn_cross": self.attn_cross,
            "norm_ffn": self.norm_ffn,
            "ffn": self.ffn,
        })


def _bounded_sigmoid(t):
    """Sigmoid with logits clamped to ±30 so outputs stay strictly in (0, 1)
    even after float64 rounding; the clamp region has ~zero gradient anyway."""
    return T.sigmoid(T.minimum(T.maximum(t, -30.0), 30.0))


class PredictionHeads:
    """Classification over C+1 (last index = no object) and sigmoid box head."""

    # Both heads start as constants: boxes sit on their reference points and
    # every query is confidently "no object", so early focal gradient
    # concentrates on matched queries instead of churning the background.
    NO_OBJECT_PRIOR_LOGIT = 4.0

    def __init__(self, d_model, num_classes, rng):
        self.num_classes = num_classes
        self.cls = Linear(d_model, num_classes + 1, rng, zero_init=True)
        self.cls.b.data[num_classes] = self.NO_OBJECT_PRIOR_LOGIT
        self.reg = Mlp((d_model, d_model, 6), rng, zero_init_last=True)

    def __call__(self, q, ref_logits):
        logits = self.cls(q)
        reg = self.reg(q)
        centers_ra = _bounded_sigmoid(reg[:, 0:2] + ref_logits)
        rest = _bounded_sigmoid(reg[:, 2:6])  # Doppler center + three sizes
        boxes = T.concat([centers_ra, rest], axis=1)  # (r, a, d, sr, sa, sd)
        return logits, boxes

    def parameters(self):
        return prefixed({"cls": self.cls, "reg": self.reg})


@dataclass
class DecoderOutput:
    """Per-layer predictions; the last entry is the final head output."""

    class_logits: list  # Tensors (M, C+1)
    boxes: list  # Tensors (M, 6)
    cross_attention: list  # np arrays (M, N), head-averaged
    memory: object = None

    @property
    def final_logits(self):
        return self.class_logits[-1]

    @property
    def final_boxes(self):
        return self.boxes[-1]

    def num_layers(self):
        return len(self.boxes)


def boxes_to_box3d(boxes):
    """(M, 6) array of (r, a, d, sr, sa, sd) rows -> list of Box3D."""
    out = []
    for row in np.asarray(boxes, dtype=np.float64):
        out.append(raddata.Box3D(tuple(row[:3]), tuple(row[3:])))
    return out


def decompose_views(output):
    """Project the final-layer boxes into the RA and RD planes."""
    boxes = boxes_to_box3d(output.final_boxes.data)
    ra = [raddata.project_box(b, raddata.VIEW_RA) for b in boxes]
    rd = [raddata.project_box(b, raddata.VIEW_RD) for b in boxes]
    return ra, rd
