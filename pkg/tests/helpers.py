"""Independent oracles shared by module tests and the acceptance suite."""

import functools
import itertools

import numpy as np


@functools.lru_cache(maxsize=None)
def _perm_array(m, g):
    return np.array(list(itertools.permutations(range(m), g)), dtype=np.intp)


def brute_force_min_cost(cost):
    """Exhaustive enumeration of every injective gt->query assignment.

    Totals accumulate left-to-right in gt order, matching the sequential
    summation of MatchAssignment.total_cost bit for bit.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, g = cost.shape
    if g == 0:
        return 0.0
    perms = _perm_array(m, g)
    totals = cost[perms[:, 0], 0].copy()
    for j in range(1, g):
        totals = totals + cost[perms[:, j], j]
    return float(totals.min())


def iou_center_size(a, b):
    """Plain axis-aligned IoU for flat (centers..., sizes...) vectors."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    k = a.size // 2
    a_lo, a_hi = a[:k] - a[k:] / 2, a[:k] + a[k:] / 2
    b_lo, b_hi = b[:k] - b[k:] / 2, b[:k] + b[k:] / 2
    inter = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None).prod()
    union = a[k:].prod() + b[k:].prod() - inter
    return inter / union


def random_box(rng, k):
    center = rng.uniform(0.2, 0.8, size=k)
    size = rng.uniform(0.05, 0.4, size=k)
    return np.concatenate([center, size])


def _greedy_tp_count(prefix, gts, iou_t):
    """Fresh greedy matching of a detection prefix, one-to-one per frame."""
    matched = set()
    tp = 0
    for frame, _, vec in prefix:
        best, best_idx = 0.0, None
        for idx, (gt_frame, gt_vec) in enumerate(gts):
            if idx in matched or gt_frame != frame:
                continue
            value = iou_center_size(vec, gt_vec)
            if value > best:
                best, best_idx = value, idx
        if best_idx is not None and best >= iou_t:
            matched.add(best_idx)
            tp += 1
    return tp


def brute_force_ap(dets, gts, iou_t):
    """AP oracle: re-derives every PR point from scratch per score prefix.

    Same defined quantity as metrics.average_precision, but each cumulative
    TP count comes from an independent full re-match of the prefix and the
    IoU comes from this module's own implementation.
    """
    if not gts:
        return 0.0
    order = sorted(dets, key=lambda e: (-e[1], e[2].tobytes()))
    if not order:
        return 0.0
    n_gt = len(gts)
    pr = []
    for k in range(1, len(order) + 1):
        tp = _greedy_tp_count(order[:k], gts, iou_t)
        pr.append((tp / k, tp / n_gt))
    precisions = [pr[0][0]] + [p for p, _ in pr]
    recalls = [0.0] + [r for _, r in pr]
    ap = 0.0
    for n in range(len(pr)):
        ap += (recalls[n + 1] - recalls[n]) * max(precisions[n], precisions[n + 1])
    return ap


def random_eval_fixture(rng, n_frames=4, classes=(0, 1, 2)):
    """Random per-frame ground truths plus noisy detections around them."""
    from radq.metrics import Detection
    from radq.raddata import Box3D, GroundTruthObject

    frame_gts, frame_dets = [], []
    for _ in range(n_frames):
        gts, dets = [], []
        for _ in range(int(rng.integers(0, 4))):
            vec = random_box(rng, 3)
            cls = int(rng.choice(classes))
            gts.append(GroundTruthObject(cls, Box3D(tuple(vec[:3]), tuple(vec[3:]))))
            if rng.uniform() < 0.85:  # jittered true positive candidate
                noisy = np.clip(vec + rng.normal(0.0, 0.02, size=6), 0.01, 0.99)
                dets.append(Detection(cls, float(rng.uniform(0.3, 1.0)),
                                      Box3D(tuple(noisy[:3]), tuple(noisy[3:]))))
        for _ in range(int(rng.integers(0, 3))):  # background noise
            vec = random_box(rng, 3)
            dets.append(Detection(int(rng.choice(classes)), float(rng.uniform(0.0, 0.6)),
                                  Box3D(tuple(vec[:3]), tuple(vec[3:]))))
        frame_gts.append(gts)
        frame_dets.append(dets)
    return frame_dets, frame_gts


def brute_force_map(frame_dets, frame_gts, cfg):
    """Independent mAP: pool per class, average brute_force_ap over thresholds."""
    from radq.raddata import project_box

    def vec(box):
        return box.as_vector() if cfg.view == "rad" else project_box(box, cfg.view).as_vector()

    by_class_dets, by_class_gts = {}, {}
    for i, (dets, gts) in enumerate(zip(frame_dets, frame_gts)):
        for det in dets:
            if det.score >= cfg.score_floor:
                by_class_dets.setdefault(det.class_id, []).append((i, det.score, vec(det.box)))
        for gt in gts:
            by_class_gts.setdefault(gt.class_id, []).append((i, vec(gt.box)))
    aps = []
    for cls in sorted(by_class_gts):
        per_thr = [
            brute_force_ap(by_class_dets.get(cls, []), by_class_gts[cls], t)
            for t in cfg.iou_thresholds
        ]
        aps.append(sum(per_thr) / len(per_thr))
    return sum(aps) / len(aps)
