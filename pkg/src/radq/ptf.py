"""Pyramid token fusion: channel alignment, tunable positional encoding,
and column-major flattening of all pyramid levels into one token memory.

The positional budget d_pos splits between the two feature-map axes by the
factor alpha; the Doppler-designated share encodes the range (row) axis and
the azimuth share the column axis. Per level, tokens are
aligned features + zero-padded positional encoding + broadcast level
embedding, flattened column-major (row index varies fastest).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, prefixed
from .tensor import Tensor

PE_BASE = 10000.0
TWO_PI = 2.0 * math.pi


def tpe_split(d_pos, alpha):
    """Split an even positional budget into (d_dop, d_azi), both even."""
    if d_pos <= 0 or d_pos % 2 != 0:
        raise ConfigError(f"d_pos must be even and positive, got {d_pos}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    d_dop = 2 * int(math.floor(alpha * d_pos / 2.0 + 0.5))
    d_dop = min(d_dop, d_pos)
    return d_dop, d_pos - d_dop


@dataclass(frozen=True)
class TpeConfig:
    d_pos: int
    alpha: float
    d_dop: int = field(init=False)
    d_azi: int = field(init=False)

    def __post_init__(self):
        d_dop, d_azi = tpe_split(self.d_pos, self.alpha)
        object.__setattr__(self, "d_dop", d_dop)
        object.__setattr__(self, "d_azi", d_azi)


def _inv_freqs(d):
    """1 / base^(2*(i//2)/d) for i in 0..d-1: sin/cos pairs share a frequency."""
    i = np.arange(d, dtype=np.float64)
    return 1.0 / PE_BASE ** (2.0 * (i // 2) / d)


def _axis_encoding_np(pos, d):
    """pos: (K,) normalized positions in [0, 1) -> (K, d) sin/cos features."""
    if d == 0:
        return np.zeros((len(pos), 0))
    ang = np.asarray(pos)[:, None] * TWO_PI * _inv_freqs(d)[None, :]
    out = np.empty_like(ang)
    out[:, 0::2] = np.sin(ang[:, 0::2])
    out[:, 1::2] = np.cos(ang[:, 1::2])
    return out


def _axis_encoding_t(pos, d):
    """Differentiable twin of _axis_encoding_np; pos is a (K, 1) Tensor."""
    inv = Tensor(_inv_freqs(d).reshape(1, d))
    ang = T.matmul(pos * TWO_PI, inv)
    mask_sin = np.zeros(d)
    mask_sin[0::2] = 1.0
    return T.sin(ang) * Tensor(mask_sin) + T.cos(ang) * Tensor(1.0 - mask_sin)


def encode_positions(pos, cfg):
    """Sinusoidal encoding of continuous (row, col) positions in [0, 1].

    pos: (K, 2) Tensor. Returns a (K, d_pos) Tensor, differentiable in pos;
    the first d_dop dims encode pos[:, 0], the rest pos[:, 1].
    """
    parts = []
    if cfg.d_dop:
        parts.append(_axis_encoding_t(pos[:, 0:1], cfg.d_dop))
    if cfg.d_azi:
        parts.append(_axis_encoding_t(pos[:, 1:2], cfg.d_azi))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def spatial_positional_encoding(h, w, cfg):
    """Grid encoding (d_pos, H, W); positions are cell centers (i + 0.5)/n."""
    rows = _axis_encoding_np((np.arange(h) + 0.5) / h, cfg.d_dop)  # (H, d_dop)
    cols = _axis_encoding_np((np.arange(w) + 0.5) / w, cfg.d_azi)  # (W, d_azi)
    pe = np.zeros((cfg.d_pos, h, w))
    pe[: cfg.d_dop] = rows.T[:, :, None]
    pe[cfg.d_dop :] = cols.T[:, None, :]
    return pe


def token_index(row, col, h):
    """Column-major flattening: the row (range) index varies fastest."""
    return col * h + row


def token_position(i, h):
    return i % h, i // h


def flatten_column_major(fmap):
    """(D, H, W) Tensor -> (H*W, D) tokens ordered column-major."""
    d, h, w = fmap.shape
    return T.reshape(T.transpose(fmap, (2, 1, 0)), (w * h, d))


def align_channels(fmap, proj, norm):
    """1x1 convolution (C -> D) plus channel layer norm, layout preserved."""
    c, h, w = fmap.shape
    if proj.w.shape[0] != c:
        raise ConfigError(f"projection expects {proj.w.shape[0]} channels, level has {c}")
    flat = T.reshape(T.transpose(fmap, (1, 2, 0)), (h * w, c))
    aligned = norm(proj(flat))
    return T.transpose(T.reshape(aligned, (h, w, aligned.shape[1])), (2, 0, 1))


@dataclass
class TokenMemory:
    """Fused N x D token sequence plus the metadata to invert the flattening."""

    tokens: Tensor
    level_offsets: list
    pos: np.ndarray  # (N, D) zero-padded positional encodings, constant
    level_shapes: list

    def level_slice(self, level):
        start = self.level_offsets[level]
        h, w = self.level_shapes[level]
        return start, start + h * w


class PyramidTokenFusion:
    def __init__(self, level_channels, d_model, tpe, rng):
        if tpe.d_pos > d_model:
            raise ConfigError(f"d_pos {tpe.d_pos} exceeds model dim {d_model}")
        self.d_model = d_model
        self.tpe = tpe
        self.aligns = [
            (Linear(c, d_model, rng), LayerNorm(d_model)) for c in level_channels
        ]
        self.level_embed = [
            Tensor(rng.normal(0.0, 0.02, size=d_model), requires_grad=True)
            for _ in level_channels
        ]

    def fuse_tokens(self, pyramid):
        if len(pyramid.levels) != len(self.aligns):
            raise ConfigError(
                f"fusion built for {len(self.aligns)} levels, pyramid has {len(pyramid.levels)}"
            )
        token_blocks, pos_blocks, offsets, shapes = [], [], [], []
        n = 0
        for fmap, (proj, norm), embed in zip(pyramid.levels, self.aligns, self.level_embed):
            _, h, w = fmap.shape
            aligned = align_channels(fmap, proj, norm)
            pe = spatial_positional_encoding(h, w, self.tpe)
            pe_tokens = np.zeros((h * w, self.d_model))
            # flatten the PE column-major too, zero-padded from d_pos to D
            pe_tokens[:, : self.tpe.d_pos] = pe.transpose(2, 1, 0).reshape(w * h, self.tpe.d_pos)
            tokens = flatten_column_major(aligned) + Tensor(pe_tokens) + embed
            token_blocks.append(tokens)
            pos_blocks.append(pe_tokens)
            offsets.append(n)
            shapes.append((h, w))
            n += h * w
        memory = T.concat(token_blocks, axis=0)
        return TokenMemory(memory, offsets, np.concatenate(pos_blocks, axis=0), shapes)

    __call__ = fuse_tokens

    def parameters(self):
        out = {}
        for i, ((proj, norm), embed) in enumerate(zip(self.aligns, self.level_embed)):
            out.update(prefixed({f"align{i}.proj": proj, f"align{i}.norm": norm}))
            out[f"level_embed{i}"] = embed
        return out
