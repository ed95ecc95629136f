"""Feature-pyramid extraction from a preprocessed radar cube.

The pluggable contract is: callable Tensor (R, A, D) -> FeaturePyramid with
a ``parameters()`` mapping. The reference implementation folds Doppler bins
into channels and applies one non-overlapping strided convolution (patch
embedding) plus a pointwise nonlinearity per pyramid level, so feature maps
are 2-D over (range, azimuth).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import glorot, prefixed, silu, zeros


@dataclass
class FeaturePyramid:
    """Per-level feature maps (C_l, H_l, W_l), finest first."""

    levels: list

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("pyramid needs at least one level")
        sizes = [lvl.shape[1:] for lvl in self.levels]
        for a, b in zip(sizes, sizes[1:]):
            if not (b[0] < a[0] and b[1] < a[1]):
                raise ConfigError(f"level spatial sizes must strictly decrease, got {sizes}")

    @property
    def spatial_shapes(self):
        return [lvl.shape[1:] for lvl in self.levels]


@dataclass(frozen=True)
class BackboneConfig:
    """Per-level downsample factors (cumulative) and channel widths."""

    strides: tuple = (8, 2, 2)
    channels: tuple = (24, 32, 48)

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise ConfigError("strides and channels must have equal length")
        if any(s < 2 for s in self.strides):
            raise ConfigError("strides must be >= 2")


def _patch_conv(x, stride, w, b):
    """Non-overlapping stride x stride convolution via reshape + matmul."""
    c, h, wd = x.shape
    ho, wo = h // stride, wd // stride
    patches = T.reshape(x, (c, ho, stride, wo, stride))
    patches = T.transpose(patches, (1, 3, 0, 2, 4))
    patches = T.reshape(patches, (ho * wo, c * stride * stride))
    out = T.add(T.matmul(patches, w), b)
    return T.transpose(T.reshape(out, (ho, wo, w.shape[1])), (2, 0, 1))


class ReferenceBackbone:
    def __init__(self, doppler_bins, cfg=BackboneConfig(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.stages = []
        c_in = doppler_bins
        for stride, c_out in zip(cfg.strides, cfg.channels):
            fan_in = c_in * stride * stride
            self.stages.append(
                (stride, glorot(rng, fan_in, c_out), zeros((c_out,)))
            )
            c_in = c_out

    def extract_pyramid(self, cube):
        """cube: Tensor (R, A, D) of log magnitudes -> FeaturePyramid."""
        r, a, _ = cube.shape
        total = 1
        for stride, _, _ in self.stages:
            total *= stride
            if r % total or a % total:
                raise ConfigError(
                    f"cube spatial dims ({r}, {a}) not divisible by cumulative stride {total}"
                )
        x = T.transpose(cube, (2, 0, 1))  # Doppler bins become channels
        m = x.mean()
        var = ((x - m) * (x - m)).mean()
        x = (x - m) / T.sqrt(var + 1e-6)
        levels = []
        for stride, w, b in self.stages:
            x = silu(_patch_conv(x, stride, w, b))
            levels.append(x)
        return FeaturePyramid(levels)

    __call__ = extract_pyramid

    def parameters(self):
        out = {}
        for i, (_, w, b) in enumerate(self.stages):
            out[f"stage{i}.w"] = w
            out[f"stage{i}.b"] = b
        return out
