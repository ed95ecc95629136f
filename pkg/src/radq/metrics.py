"""Detection metrics: axis-aligned IoU, interpolated AP, and mAP tables.

Detections are pooled per class across frames and greedy-matched to the
highest-IoU unmatched ground truth of their own frame. AP integrates the
precision-recall points as sum (R_{n+1} - R_n) * max(P_n, P_{n+1}) with a
virtual starting point at recall 0 carrying the first precision. mAP
averages over IoU thresholds, then over the classes present in the ground
truth; frame and detection input order never change the result (ties sort
by score, then box bytes).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EvalError
from .raddata import CLASS_NAMES, VIEW_RA, VIEW_RD, project_box

VIEW_RAD = "rad"

THRESHOLDS_3D = (0.4, 0.5, 0.6, 0.7)
THRESHOLDS_2D = (0.5, 0.6, 0.7, 0.8, 0.9)

DEFAULT_SCORE_FLOOR = 0.05


@dataclass(frozen=True)
class Detection:
    """One thresholded query output: class, max object-class score, box."""

    class_id: int
    score: float
    box: object  # Box3D

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple
    view: str = VIEW_RAD
    score_floor: float = DEFAULT_SCORE_FLOOR

    def __post_init__(self):
        if not self.iou_thresholds:
            raise EvalError("need at least one IoU threshold")
        previous = 0.0
        for t in self.iou_thresholds:
            if not previous < t < 1.0:
                raise EvalError("thresholds must be strictly increasing within (0, 1)")
            previous = t
        if self.view not in (VIEW_RAD, VIEW_RA, VIEW_RD):
            raise EvalError(f"unknown view {self.view!r}")


def default_eval_config(view=VIEW_RAD):
    thresholds = THRESHOLDS_3D if view == VIEW_RAD else THRESHOLDS_2D
    return EvalConfig(thresholds, view)


def iou(a, b):
    """Axis-aligned intersection over union; 2-D/3-D inferred from the box."""
    va = a.as_vector() if hasattr(a, "as_vector") else np.asarray(a, dtype=np.float64)
    vb = b.as_vector() if hasattr(b, "as_vector") else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.size % 2:
        raise ValueError("boxes must share one flat center/size layout")
    k = va.size // 2
    if np.any(va[k:] <= 0.0) or np.any(vb[k:] <= 0.0):
        raise ValueError("box sizes must be strictly positive")
    lo = np.maximum(va[:k] - va[k:] / 2, vb[:k] - vb[k:] / 2)
    hi = np.minimum(va[:k] + va[k:] / 2, vb[:k] + vb[k:] / 2)
    inter = np.clip(hi - lo, 0.0, None).prod()
    union = va[k:].prod() + vb[k:].prod() - inter
    return float(inter / union)


def extract_detections(class_logits, boxes, score_floor=DEFAULT_SCORE_FLOOR):
    """Per-query top object-class prediction with score >= score_floor.

    class_logits: (M, C+1) array with the no-object logit last;
    boxes: (M, 6) array. No suppression beyond the score threshold.
    """
    from .raddata import Box3D

    logits = np.asarray(class_logits, dtype=np.float64)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    out = []
    for row, box in zip(probs, np.asarray(boxes, dtype=np.float64)):
        object_probs = row[:-1]
        cls = int(np.argmax(object_probs))
        score = float(object_probs[cls])
        if score >= score_floor:
            out.append(Detection(cls, score, Box3D(tuple(box[:3]), tuple(box[3:]))))
    return out


def _det_sort_key(entry):
    _, score, vec = entry
    return (-score, vec.tobytes())


def _pr_points(dets, gts, iou_t):
    """Greedy-matched cumulative (precision, recall) points in score order."""
    n_gt = len(gts)
    gt_by_frame = {}
    for idx, (frame, vec) in enumerate(gts):
        gt_by_frame.setdefault(frame, []).append((idx, vec))
    matched = set()
    points = []
    tp = 0
    for n, (frame, _, vec) in enumerate(sorted(dets, key=_det_sort_key), start=1):
        best_iou, best_idx = 0.0, None
        for idx, gt_vec in gt_by_frame.get(frame, ()):
            if idx in matched:
                continue
            value = iou(vec, gt_vec)
            if value > best_iou:
                best_iou, best_idx = value, idx
        if best_idx is not None and best_iou >= iou_t:
            matched.add(best_idx)
            tp += 1
        points.append((tp / n, tp / n_gt))
    return points


def average_precision(dets, gts, iou_t):
    """AP for one class. dets: (frame, score, box_vec); gts: (frame, box_vec)."""
    if not gts:
        return 0.0
    points = _pr_points(dets, gts, iou_t)
    if not points:
        return 0.0
    precisions = [points[0][0]] + [p for p, _ in points]  # virtual start point
    recalls = [0.0] + [r for _, r in points]
    ap = 0.0
    for n in range(len(points)):
        ap += (recalls[n + 1] - recalls[n]) * max(precisions[n], precisions[n + 1])
    return ap


@dataclass
class MapResult:
    mean_ap: float
    view: str
    thresholds: tuple
    classes: tuple
    table: dict  # (class_id, threshold) -> ap
    gt_counts: dict = field(default_factory=dict)

    def per_class_mean(self, class_id):
        return sum(self.table[class_id, t] for t in self.thresholds) / len(self.thresholds)


def _view_vector(box, view):
    if view == VIEW_RAD:
        return box.as_vector()
    return project_box(box, view).as_vector()


def mean_average_precision(frame_detections, frame_gts, cfg):
    """Dataset-level mAP: mean AP over thresholds, then over gt-present classes."""
    if len(frame_detections) != len(frame_gts):
        raise EvalError("detections and ground truths must align per frame")
    if not frame_gts:
        raise EvalError("empty dataset")
    dets_by_class = {}
    gts_by_class = {}
    for frame_idx, (dets, gts) in enumerate(zip(frame_detections, frame_gts)):
        for det in dets:
            if det.score < cfg.score_floor:
                continue
            dets_by_class.setdefault(det.class_id, []).append(
                (frame_idx, det.score, _view_vector(det.box, cfg.view))
            )
        for obj in gts:
            gts_by_class.setdefault(obj.class_id, []).append(
                (frame_idx, _view_vector(obj.box, cfg.view))
            )
    classes = tuple(sorted(gts_by_class))
    if not classes:
        raise EvalError("dataset has no ground-truth objects")
    table = {}
    for cls in classes:
        for t in cfg.iou_thresholds:
            table[cls, t] = average_precision(
                dets_by_class.get(cls, []), gts_by_class[cls], t
            )
    per_class = [
        sum(table[cls, t] for t in cfg.iou_thresholds) / len(cfg.iou_thresholds)
        for cls in classes
    ]
    result = MapResult(
        mean_ap=sum(per_class) / len(classes),
        view=cfg.view,
        thresholds=tuple(cfg.iou_thresholds),
        classes=classes,
        table=table,
        gt_counts={cls: len(gts_by_class[cls]) for cls in classes},
    )
    return result


def format_report(result):
    """Fixed-width text table: one row per class, one column per threshold."""
    name_width = max(len(CLASS_NAMES[c]) for c in result.classes) + 2
    header = "class".ljust(name_width) + "".join(
        f"AP@{t:.2f}".rjust(10) for t in result.thresholds
    ) + "mean".rjust(10)
    lines = [f"view: {result.view}", header]
    for cls in result.classes:
        row = CLASS_NAMES[cls].ljust(name_width)
        row += "".join(f"{result.table[cls, t]:10.4f}" for t in result.thresholds)
        row += f"{result.per_class_mean(cls):10.4f}"
        lines.append(row)
    lines.append(f"mAP: {result.mean_ap:.4f}")
    return "\n".join(lines) + "\n"


def write_report(result, txt_path, csv_path):
    with open(txt_path, "w") as fh:
        fh.write(format_report(result))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name"] + [f"{t:.2f}" for t in result.thresholds])
        for cls in result.classes:
            writer.writerow(
                [cls, CLASS_NAMES[cls]]
                + [f"{result.table[cls, t]:.6f}" for t in result.thresholds]
            )
        writer.writerow(["mAP", "", f"{result.mean_ap:.6f}"])
