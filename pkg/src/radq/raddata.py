"""Radar cube data model: preprocessing, frame files, synthetic scenes.

Cubes are indexed (range, azimuth, Doppler). Boxes are axis-aligned
center/size pairs normalized per axis by bin count: a blob centered at bin
c spanning e bins maps to center c/n, size e/n. Frames keep float32 bins
and float32-exact box values so the binary round trip is bit-exact.
"""

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

NUM_CLASSES = 6
CLASS_NAMES = ("person", "bicycle", "car", "motorcycle", "bus", "truck")

MAGIC = b"RADF"
FORMAT_VERSION = 1
FLAG_RAW_COMPLEX = 0
FLAG_LOG_MAGNITUDE = 1

LOG_EPS = 1e-10  # magnitude floor before log10

# Class signatures: blob extents as fractions of (range, azimuth, Doppler)
# bin counts, peak amplitudes, and a characteristic Doppler band. Together
# they make the class and the full 3-D box recoverable from the cube alone.
CLASS_EXTENT_FRACTIONS = (
    (0.094, 0.094, 0.25),
    (0.125, 0.125, 0.25),
    (0.156, 0.156, 0.375),
    (0.188, 0.188, 0.375),
    (0.219, 0.219, 0.50),
    (0.250, 0.250, 0.50),
)
# Geometric spacing (~0.5 log10 apart) keeps classes separable after the
# log transform, mimicking order-of-magnitude RCS differences.
CLASS_AMPLITUDES = (1.0, 3.0, 9.0, 27.0, 80.0, 240.0)
# Typical radial-speed band per class, as a fraction of the Doppler axis.
CLASS_DOPPLER_FRACTIONS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.75)


@dataclass
class RadCube:
    """Log-magnitude radar tensor of shape (range, azimuth, Doppler) bins."""

    bins: np.ndarray

    def __post_init__(self):
        if self.bins.ndim != 3:
            raise DataError(f"cube must be 3-D, got shape {self.bins.shape}")
        if not np.all(np.isfinite(self.bins)):
            raise DataError("cube holds non-finite values")

    @property
    def dims(self):
        return self.bins.shape


@dataclass(frozen=True)
class Box3D:
    """Normalized center/size box in (range, azimuth, Doppler) space."""

    center: tuple
    size: tuple

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise DataError("Box3D needs 3 center and 3 size components")
        if not all(0.0 <= c <= 1.0 for c in self.center):
            raise DataError(f"box center {self.center} outside [0,1]")
        if not all(0.0 < s <= 1.0 for s in self.size):
            raise DataError(f"box size {self.size} outside (0,1]")

    def as_vector(self):
        return np.array(self.center + self.size, dtype=np.float64)


@dataclass(frozen=True)
class Box2D:
    center: tuple
    size: tuple

    def __post_init__(self):
        if len(self.center) != 2 or len(self.size) != 2:
            raise DataError("Box2D needs 2 center and 2 size components")

    def as_vector(self):
        return np.array(self.center + self.size, dtype=np.float64)


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    box: Box3D

    def __post_init__(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise DataError(f"class id {self.class_id} outside [0, {NUM_CLASSES - 1}]")


@dataclass
class Frame:
    cube: RadCube
    objects: list


VIEW_RA = "ra"
VIEW_RD = "rd"


def project_box(box, view):
    """Drop one axis of a Box3D: RA keeps (range, azimuth), RD (range, Doppler)."""
    r, a, d = box.center
    sr, sa, sd = box.size
    if view == VIEW_RA:
        return Box2D((r, a), (sr, sa))
    if view == VIEW_RD:
        return Box2D((r, d), (sr, sd))
    raise ValueError(f"unknown view {view!r}")


def preprocess_log_magnitude(raw):
    """Interleaved (re, im) float pairs -> log10 magnitude cube.

    raw has shape (R, A, D, 2); output is (R, A, D) with
    log10(sqrt(re^2 + im^2) + 1e-10).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[-1] != 2:
        raise DataError(f"raw cube must have shape (R, A, D, 2), got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise DataError("raw cube holds non-finite samples")
    mag = np.sqrt(raw[..., 0] ** 2 + raw[..., 1] ** 2)
    return RadCube(np.log10(mag + LOG_EPS).astype(np.float32))


# -- frame files -------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIB")  # magic, version, R, A, D, flag
_OBJ = struct.Struct("<Bffffff")


def save_frame(frame, path):
    """Write one frame in the little-endian RADF container (log-magnitude)."""
    r, a, d = frame.cube.dims
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, r, a, d, FLAG_LOG_MAGNITUDE)]
    parts.append(np.ascontiguousarray(frame.cube.bins, dtype="<f4").tobytes())
    parts.append(struct.pack("<H", len(frame.objects)))
    for obj in frame.objects:
        parts.append(_OBJ.pack(obj.class_id, *obj.box.center, *obj.box.size))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_frame(path):
    """Read a RADF frame; raw complex payloads are preprocessed on load."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, r, a, d, flag = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(r, a, d) <= 0:
        raise FormatError(f"non-positive dims ({r}, {a}, {d})", 8)
    if flag not in (FLAG_RAW_COMPLEX, FLAG_LOG_MAGNITUDE):
        raise FormatError(f"unknown payload flag {flag}", _HEADER.size - 1)
    offset = _HEADER.size
    values = r * a * d * (2 if flag == FLAG_RAW_COMPLEX else 1)
    payload_bytes = values * 4
    if len(blob) < offset + payload_bytes + 2:
        raise FormatError("truncated payload", len(blob))
    payload = np.frombuffer(blob, dtype="<f4", count=values, offset=offset)
    offset += payload_bytes
    if flag == FLAG_RAW_COMPLEX:
        cube = preprocess_log_magnitude(payload.reshape(r, a, d, 2).astype(np.float64))
    else:
        cube = RadCube(payload.reshape(r, a, d).copy())
    (count,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    objects = []
    for _ in range(count):
        if len(blob) < offset + _OBJ.size:
            raise FormatError("truncated object record", len(blob))
        cls, cr, ca, cd, sr, sa, sd = _OBJ.unpack_from(blob, offset)
        try:
            objects.append(GroundTruthObject(cls, Box3D((cr, ca, cd), (sr, sa, sd))))
        except DataError as exc:
            raise FormatError(f"invalid object record: {exc}", offset) from exc
        offset += _OBJ.size
    if offset != len(blob):
        raise FormatError("trailing bytes after object table", offset)
    return Frame(cube, objects)


# -- synthetic scenes --------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Generator settings for a static scene with canonical object sites.

    Frames share one clutter background and one (range, azimuth) lattice of
    candidate object sites; each frame occupies a random subset of sites
    with random classes. Class identity fixes blob extent, amplitude, and
    Doppler band, so held-out frames recombine components the model has
    seen rather than sampling unconstrained continuous geometry.
    """

    dims: tuple = (64, 64, 16)
    count_range: tuple = (2, 3)
    noise_floor: float = 0.05
    classes: tuple = tuple(range(NUM_CLASSES))
    amplitude_jitter: float = 0.1  # relative spread around the class amplitude
    clutter_seed: int = 7  # one static background per spec; objects move over it
    site_grid: tuple = (2, 2)  # (range, azimuth) lattice of object sites

    def class_amplitude(self, class_id, rng):
        base = CLASS_AMPLITUDES[class_id]
        return float(base * rng.uniform(1.0 - self.amplitude_jitter,
                                        1.0 + self.amplitude_jitter))

    def class_extents(self, class_id):
        """Blob extent in bins per axis; even, at least 2, must fit the cube."""
        fr = CLASS_EXTENT_FRACTIONS[class_id]
        ext = tuple(max(2, 2 * int(round(f * n / 2.0))) for f, n in zip(fr, self.dims))
        for e, n in zip(ext, self.dims):
            if e > n:
                raise DataError(f"class {class_id} extent {ext} exceeds cube dims {self.dims}")
        return ext

    def class_doppler_bin(self, class_id):
        return int(round(CLASS_DOPPLER_FRACTIONS[class_id] * self.dims[2]))

    def sites(self):
        """(range, azimuth) bin centers of the canonical site lattice."""
        rows, cols = self.site_grid
        r_bins, a_bins = self.dims[0], self.dims[1]
        out = [
            (int(round((i + 0.5) / rows * r_bins)), int(round((j + 0.5) / cols * a_bins)))
            for i in range(rows)
            for j in range(cols)
        ]
        return out


def _raised_cosine(n_bins, center, extent):
    """Separable Hann profile: support exactly [center - extent/2, center + extent/2]."""
    idx = np.arange(n_bins, dtype=np.float64)
    u = (idx - center) / (extent / 2.0)
    prof = 0.5 * (1.0 + np.cos(np.pi * np.clip(u, -1.0, 1.0)))
    prof[np.abs(u) >= 1.0] = 0.0
    return prof


def compose_frame(dims, placements, noise_floor, clutter_seed):
    """Render blobs over a complex clutter field; returns the preprocessed Frame.

    placements: iterable of (class_id, center_bins, extent_bins, amplitude).
    Ground-truth boxes are exactly the blob supports. The clutter field is a
    pure function of (dims, noise_floor, clutter_seed): a static background
    that frames of one dataset share, like a stationary radar scene.
    """
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([clutter_seed, 0x5EED])))
    r, a, d = dims
    sigma = noise_floor / math.sqrt(2.0)
    re = rng.normal(0.0, sigma, size=dims)
    im = rng.normal(0.0, sigma, size=dims)
    objects = []
    for class_id, center, extent, amp in placements:
        for c, e, n in zip(center, extent, dims):
            if c - e / 2.0 < 0.0 or c + e / 2.0 > n:
                raise DataError(f"blob at {center} extent {extent} exceeds cube {dims}")
        blob = (
            amp
            * _raised_cosine(r, center[0], extent[0])[:, None, None]
            * _raised_cosine(a, center[1], extent[1])[None, :, None]
            * _raised_cosine(d, center[2], extent[2])[None, None, :]
        )
        re += blob
        box = Box3D(
            tuple(float(np.float32(c / n)) for c, n in zip(center, dims)),
            tuple(float(np.float32(e / n)) for e, n in zip(extent, dims)),
        )
        objects.append(GroundTruthObject(class_id, box))
    raw = np.stack([re, im], axis=-1)
    return Frame(preprocess_log_magnitude(raw), objects)


def synth_scene(rng_seed, spec):
    """Deterministic synthetic frame: class-signature blobs at lattice sites."""
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([rng_seed])))
    sites = spec.sites()
    lo, hi = spec.count_range
    count = min(int(rng.integers(lo, hi + 1)), len(sites))
    picked = rng.choice(len(sites), size=count, replace=False) if count else []
    placements = []
    for site_idx in picked:
        class_id = int(spec.classes[rng.integers(0, len(spec.classes))])
        extent = spec.class_extents(class_id)
        r_bin, a_bin = sites[site_idx]
        center = (r_bin, a_bin, spec.class_doppler_bin(class_id))
        for c, e, n in zip(center, extent, spec.dims):
            if c - e / 2.0 < 0.0 or c + e / 2.0 > n:
                raise DataError(
                    f"site {center} with class-{class_id} extent {extent} "
                    f"exceeds cube dims {spec.dims}"
                )
        amp = spec.class_amplitude(class_id, rng)
        placements.append((class_id, center, extent, amp))
    return compose_frame(spec.dims, placements, spec.noise_floor, spec.clutter_seed)


# -- dataset directories -----------------------------------------------

INDEX_NAME = "index.txt"


def write_dataset(out_dir, base_seed, n_frames, spec):
    """Write numbered frame files plus a plain-text index of names and seeds."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(n_frames):
        seed = base_seed + i
        name = f"frame_{i:05d}.radf"
        save_frame(synth_scene(seed, spec), os.path.join(out_dir, name))
        lines.append(f"{name} {seed}")
    with open(os.path.join(out_dir, INDEX_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return [line.split()[0] for line in lines]


def load_dataset(data_dir):
    """Load every frame listed in the directory index, in index order."""
    index_path = os.path.join(data_dir, INDEX_NAME)
    if not os.path.exists(index_path):
        raise DataError(f"no {INDEX_NAME} in {data_dir}")
    frames = []
    with open(index_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name = line.split()[0]
            frames.append(load_frame(os.path.join(data_dir, name)))
    if not frames:
        raise DataError(f"dataset index {index_path} lists no frames")
    return frames
