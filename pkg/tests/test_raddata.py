import math
import struct

import numpy as np
import pytest

from radq import raddata as rd
from radq.errors import DataError, FormatError


def test_preprocess_unit_magnitude():
    raw = np.zeros((1, 1, 1, 2))
    raw[..., 0] = 1.0
    cube = rd.preprocess_log_magnitude(raw)
    assert abs(cube.bins[0, 0, 0]) < 1e-9


def test_preprocess_zero_floor():
    raw = np.zeros((2, 2, 2, 2))
    cube = rd.preprocess_log_magnitude(raw)
    assert np.allclose(cube.bins, -10.0)


def test_preprocess_hand_case():
    raw = np.zeros((1, 1, 1, 2))
    raw[..., 0] = 3.0
    raw[..., 1] = 4.0
    cube = rd.preprocess_log_magnitude(raw)
    assert abs(cube.bins[0, 0, 0] - math.log10(5.0)) < 1e-6


def test_preprocess_rejects_non_finite():
    raw = np.zeros((1, 1, 1, 2))
    raw[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError):
        rd.preprocess_log_magnitude(raw)


def test_preprocess_shape_check():
    with pytest.raises(DataError):
        rd.preprocess_log_magnitude(np.zeros((2, 2, 2)))


class TestFrameFiles:
    def _frame(self, seed=0):
        spec = rd.SceneSpec(dims=(8, 8, 4), count_range=(1, 2))
        return rd.synth_scene(seed, spec)

    def test_round_trip_bit_exact(self, tmp_path):
        for seed in range(100):
            frame = self._frame(seed)
            path = tmp_path / f"f{seed}.radf"
            rd.save_frame(frame, path)
            loaded = rd.load_frame(path)
            assert np.array_equal(loaded.cube.bins, frame.cube.bins)
            assert loaded.objects == frame.objects

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.radf"
        rd.save_frame(self._frame(), path)
        blob = bytearray(path.read_bytes())
        blob[0:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as exc:
            rd.load_frame(path)
        assert exc.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.radf"
        rd.save_frame(self._frame(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            rd.load_frame(path)

    def test_dim_mismatch(self, tmp_path):
        path = tmp_path / "dims.radf"
        rd.save_frame(self._frame(), path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 8, 0)  # zero range bins
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as exc:
            rd.load_frame(path)
        assert exc.value.offset == 8

    def test_constructed_raw_fixture(self, tmp_path):
        """Hand-built 4x4x2 raw-complex file with one object."""
        r, a, d = 4, 4, 2
        raw = np.zeros((r, a, d, 2), dtype="<f4")
        raw[2, 2, 1, 0] = 5.0
        box = (0.5, 0.5, 0.5, 0.25, 0.25, 0.5)
        blob = struct.pack("<4sIIIIB", b"RADF", 1, r, a, d, 0)
        blob += raw.tobytes()
        blob += struct.pack("<H", 1)
        blob += struct.pack("<Bffffff", 2, *box)
        path = tmp_path / "raw.radf"
        path.write_bytes(blob)
        frame = rd.load_frame(path)
        assert frame.cube.dims == (4, 4, 2)
        assert abs(frame.cube.bins[2, 2, 1] - math.log10(5.0)) < 1e-6
        assert len(frame.objects) == 1
        obj = frame.objects[0]
        assert obj.class_id == 2
        assert obj.box.center == (0.5, 0.5, 0.5)
        assert obj.box.size == (0.25, 0.25, 0.5)


class TestSynthScenes:
    def test_zero_objects_noise_only(self):
        spec = rd.SceneSpec(dims=(16, 16, 8), count_range=(0, 0), noise_floor=0.05)
        frame = rd.synth_scene(3, spec)
        assert frame.objects == []
        # log10 of Rayleigh noise with sigma 0.05 stays well below 0 dB
        assert frame.cube.bins.max() < -0.3

    def test_determinism(self):
        spec = rd.SceneSpec(dims=(32, 32, 8))
        f1 = rd.synth_scene(11, spec)
        f2 = rd.synth_scene(11, spec)
        assert np.array_equal(f1.cube.bins, f2.cube.bins)
        assert f1.objects == f2.objects

    def test_seeds_differ(self):
        spec = rd.SceneSpec(dims=(32, 32, 8))
        assert not np.array_equal(
            rd.synth_scene(1, spec).cube.bins, rd.synth_scene(2, spec).cube.bins
        )

    def test_centered_blob_box_arithmetic(self):
        frame = rd.compose_frame((64, 64, 16), [(1, (32, 32, 8), (8, 8, 4), 1.0)], 0.01, 5)
        (obj,) = frame.objects
        assert obj.box.center == (0.5, 0.5, 0.5)
        assert obj.box.size == (0.125, 0.125, 0.25)

    def test_blob_support_matches_box(self):
        frame = rd.compose_frame((64, 64, 16), [(0, (32, 32, 8), (8, 8, 4), 2.0)], 0.0, 7)
        cube = frame.cube.bins
        inside = cube[29:36, 32, 8]
        outside_level = cube[32, 32, :2].max()
        assert inside.max() > outside_level + 1.0  # blob clearly above floor

    def test_out_of_bounds_placement_rejected(self):
        with pytest.raises(DataError):
            rd.compose_frame((16, 16, 8), [(0, (1, 8, 4), (8, 8, 4), 1.0)], 0.05, 0)

    def test_extent_exceeding_cube_rejected(self):
        spec = rd.SceneSpec(dims=(8, 8, 1))  # minimum blob needs 2 Doppler bins
        with pytest.raises(DataError):
            spec.class_extents(5)


class TestProjection:
    def test_ra(self):
        box = rd.Box3D((0.5, 0.5, 0.5), (0.1, 0.2, 0.3))
        p = rd.project_box(box, rd.VIEW_RA)
        assert p.center == (0.5, 0.5) and p.size == (0.1, 0.2)

    def test_rd(self):
        box = rd.Box3D((0.5, 0.5, 0.5), (0.1, 0.2, 0.3))
        p = rd.project_box(box, rd.VIEW_RD)
        assert p.center == (0.5, 0.5) and p.size == (0.1, 0.3)

    def test_equal_boxes_equal_projections(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = tuple(rng.uniform(0.2, 0.8, 3))
            s = tuple(rng.uniform(0.05, 0.2, 3))
            b1, b2 = rd.Box3D(c, s), rd.Box3D(c, s)
            assert b1 == b2
            for view in (rd.VIEW_RA, rd.VIEW_RD):
                assert rd.project_box(b1, view) == rd.project_box(b2, view)


class TestDatasetDir:
    def test_write_and_load(self, tmp_path):
        spec = rd.SceneSpec(dims=(16, 16, 8), count_range=(1, 2))
        names = rd.write_dataset(tmp_path, 100, 5, spec)
        assert names == [f"frame_{i:05d}.radf" for i in range(5)]
        index = (tmp_path / "index.txt").read_text().strip().splitlines()
        assert index[0] == "frame_00000.radf 100"
        frames = rd.load_dataset(tmp_path)
        assert len(frames) == 5
        direct = rd.synth_scene(102, spec)
        assert np.array_equal(frames[2].cube.bins, direct.cube.bins)

    def test_missing_index(self, tmp_path):
        with pytest.raises(DataError):
            rd.load_dataset(tmp_path)
