import numpy as np
import pytest

from radq.backbone import BackboneConfig, FeaturePyramid, ReferenceBackbone
from radq.errors import ConfigError
from radq.tensor import GradTape, Tensor


def _cube(r, a, d, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(r, a, d)))


def test_paper_scale_resolutions():
    bb = ReferenceBackbone(64, BackboneConfig(channels=(8, 12, 16)), np.random.default_rng(0))
    pyr = bb(_cube(256, 256, 64))
    assert pyr.spatial_shapes == [(32, 32), (16, 16), (8, 8)]


def test_desk_scale_resolutions():
    bb = ReferenceBackbone(16, rng=np.random.default_rng(0))
    pyr = bb(_cube(64, 64, 16))
    assert pyr.spatial_shapes == [(8, 8), (4, 4), (2, 2)]


def test_levels_halve():
    bb = ReferenceBackbone(8, BackboneConfig(strides=(4, 2, 2), channels=(8, 8, 8)),
                           np.random.default_rng(1))
    pyr = bb(_cube(32, 64, 8))
    shapes = pyr.spatial_shapes
    for (h1, w1), (h2, w2) in zip(shapes, shapes[1:]):
        assert h1 == 2 * h2 and w1 == 2 * w2


def test_channel_widths_follow_config():
    cfg = BackboneConfig(strides=(2, 2), channels=(5, 9))
    bb = ReferenceBackbone(4, cfg, np.random.default_rng(2))
    pyr = bb(_cube(16, 16, 4))
    assert [lvl.shape[0] for lvl in pyr.levels] == [5, 9]


def test_indivisible_dims_rejected():
    bb = ReferenceBackbone(4, rng=np.random.default_rng(3))
    with pytest.raises(ConfigError):
        bb(_cube(60, 64, 4))


def test_shapes_pure_function_of_config_and_dims():
    cfg = BackboneConfig(strides=(4, 2), channels=(6, 6))
    shapes = []
    for seed in (0, 1):
        bb = ReferenceBackbone(4, cfg, np.random.default_rng(seed))
        shapes.append(bb(_cube(32, 32, 4, seed=seed)).spatial_shapes)
    assert shapes[0] == shapes[1] == [(8, 8), (4, 4)]


def test_outputs_finite():
    bb = ReferenceBackbone(16, rng=np.random.default_rng(4))
    pyr = bb(_cube(64, 64, 16, seed=4))
    for lvl in pyr.levels:
        assert np.all(np.isfinite(lvl.data))


def test_gradient_reaches_stage_weights():
    bb = ReferenceBackbone(4, BackboneConfig(strides=(2, 2), channels=(3, 4)),
                           np.random.default_rng(5))
    with GradTape() as tape:
        pyr = bb(_cube(8, 8, 4, seed=5))
        loss = sum((lvl * lvl).sum() for lvl in pyr.levels)
    tape.backward(loss)
    for name, p in bb.parameters().items():
        if name.endswith(".w"):
            assert p.grad is not None and np.any(p.grad != 0.0), name


def test_pyramid_must_decrease():
    t = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ConfigError):
        FeaturePyramid([t, t])
