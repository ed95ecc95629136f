"""Deterministic pixmap rendering: detection overlays and attention maps.

Detection maps use the per-view max projection of the cube as a grayscale
background with 1-pixel class-colored box borders (binary PPM). Attention
maps unflatten one query's weights over one pyramid level back to its
(H, W) grid (binary PGM). Output bytes depend only on the inputs.
"""

import numpy as np

from .raddata import VIEW_RA, VIEW_RD, project_box

CLASS_COLORS = (
    (230, 60, 60),    # person
    (60, 130, 230),   # bicycle
    (60, 200, 90),    # car
    (235, 200, 60),   # motorcycle
    (200, 90, 220),   # bus
    (90, 220, 210),   # truck
)


def _to_bytes(values):
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path, gray):
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def _box_pixels(center, size, n_rows, n_cols):
    r0 = int(round((center[0] - size[0] / 2) * n_rows))
    r1 = int(round((center[0] + size[0] / 2) * n_rows)) - 1
    c0 = int(round((center[1] - size[1] / 2) * n_cols))
    c1 = int(round((center[1] + size[1] / 2) * n_cols)) - 1
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(max(r1, r0), n_rows - 1), min(max(c1, c0), n_cols - 1)
    return r0, r1, c0, c1


def render_detection_map(frame, detections, view, path):
    """Max-projected background plus 1-pixel rectangles colored by class."""
    cube = frame.cube.bins
    if view == VIEW_RA:
        background = cube.max(axis=2)  # rows: range, cols: azimuth
    elif view == VIEW_RD:
        background = cube.max(axis=1)  # rows: range, cols: Doppler
    else:
        raise ValueError(f"unknown view {view!r}")
    gray = _to_bytes(background)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    n_rows, n_cols = gray.shape
    for det in detections:
        flat = project_box(det.box, view)
        r0, r1, c0, c1 = _box_pixels(flat.center, flat.size, n_rows, n_cols)
        color = np.array(CLASS_COLORS[det.class_id % len(CLASS_COLORS)], dtype=np.uint8)
        rgb[r0, c0 : c1 + 1] = color
        rgb[r1, c0 : c1 + 1] = color
        rgb[r0 : r1 + 1, c0] = color
        rgb[r0 : r1 + 1, c1] = color
    write_ppm(path, rgb)


def render_attention_map(attention, memory, level, query, path):
    """One query's final-layer cross-attention over one level, as grayscale.

    attention: (M, N) head-averaged weights; memory provides the level
    offsets/shapes that invert the column-major token flattening.
    """
    weights = np.asarray(attention, dtype=np.float64)
    if not 0 <= level < len(memory.level_shapes):
        raise ValueError(f"level {level} outside [0, {len(memory.level_shapes) - 1}]")
    if not 0 <= query < weights.shape[0]:
        raise ValueError(f"query {query} outside [0, {weights.shape[0] - 1}]")
    lo, hi = memory.level_slice(level)
    h, w = memory.level_shapes[level]
    vec = weights[query, lo:hi]
    grid = vec.reshape(w, h).T  # token index = col * H + row
    write_pgm(path, _to_bytes(grid))
