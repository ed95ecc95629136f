"""Set-prediction training objective.

Ground truth is matched one-to-one to queries by minimum-cost assignment;
the loss on matched pairs combines GIoU and L1 box terms in the full RAD
space and in both 2-D projections, plus focal classification over all
queries. Gradients never flow through the assignment itself.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

BOX3D_DIMS = 6
LOG_FLOOR = 1e-12  # probability clamp inside focal log


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 40.0  # RAD box term
    beta2: float = 15.0  # RA box term
    beta3: float = 15.0  # RD box term
    beta4: float = 10.0  # classification term
    beta_giou: float = 5.0
    beta_l1: float = 5.0

    def __post_init__(self):
        if any(b < 0 for b in self.as_tuple()):
            raise ValueError("loss weights must be nonnegative")

    def as_tuple(self):
        return (self.beta1, self.beta2, self.beta3, self.beta4, self.beta_giou, self.beta_l1)


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha_t: tuple = ()  # per-class weights over C+1 classes, no-object last

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_t):
            raise ValueError("alpha_t entries must lie in [0, 1]")


def default_focal_params(num_classes, gamma=2.0, alpha=0.25):
    """Object classes get alpha, the no-object class its complement."""
    return FocalParams(gamma, (alpha,) * num_classes + (1.0 - alpha,))


@dataclass(frozen=True)
class MatchAssignment:
    """Injective gt -> query pairing; pairs are (query, gt) sorted by gt."""

    pairs: tuple
    total_cost: float

    def query_indices(self):
        return np.array([q for q, _ in self.pairs], dtype=np.intp)


def _exact_total(cost, fixed_pairs):
    return sum((Fraction(float(cost[q, g])) for q, g in fixed_pairs), Fraction(0))


def _solve(cost):
    """Min-cost injective assignment of all gts (columns) to queries (rows)."""
    rows, cols = linear_sum_assignment(cost.T)  # rows are gt indices in order
    return list(cols)


def hungarian_match(cost):
    """Optimal assignment of G ground truths to M queries (G <= M).

    Among equal-cost optima the lexicographically smallest query tuple
    (ordered by gt index) is returned; equality is decided in exact rational
    arithmetic so float summation order cannot flip a tie.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix holds non-finite entries")
    m, g_total = cost.shape
    if g_total > m:
        raise DataError(f"{g_total} ground-truth objects exceed {m} queries")
    if g_total == 0:
        return MatchAssignment((), 0.0)

    base = _solve(cost)
    c_star = _exact_total(cost, [(q, g) for g, q in enumerate(base)])

    chosen = []
    used = set()
    fixed_exact = Fraction(0)
    for g in range(g_total):
        found = False
        for q in range(m):
            if q in used:
                continue
            total = fixed_exact + Fraction(float(cost[q, g]))
            rest_g = list(range(g + 1, g_total))
            if rest_g:
                rest_q = [i for i in range(m) if i not in used and i != q]
                sub = cost[np.ix_(rest_q, rest_g)]
                sub_cols = _solve(sub)
                total += sum(
                    (Fraction(float(sub[qq, gg])) for gg, qq in enumerate(sub_cols)),
                    Fraction(0),
                )
            if total == c_star:
                chosen.append(q)
                used.add(q)
                fixed_exact += Fraction(float(cost[q, g]))
                found = True
                break
        if not found:
            # float-degenerate corner: keep the solver's assignment as-is
            chosen = base
            break

    pairs = tuple((q, g) for g, q in enumerate(chosen))
    running = 0.0
    for q, g in pairs:
        running += float(cost[q, g])
    return MatchAssignment(pairs, running)


# -- box losses ---------------------------------------------------------


def _prod(v, k):
    out = v[0]
    for i in range(1, k):
        out = out * v[i]
    return out


def giou_loss(p, g):
    """Generalized-IoU loss 1 - IoU + |C \\ union| / |C| for center/size boxes.

    Works for 2-D (area) and 3-D (volume) boxes given as flat
    (centers..., sizes...) vectors; differentiable almost everywhere and
    bounded to [0, 2).
    """
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    if p.shape != g.shape or p.ndim != 1 or p.shape[0] % 2:
        raise ValueError(f"boxes must be equal flat center/size vectors, got {p.shape}/{g.shape}")
    k = p.shape[0] // 2
    if np.any(p.data[k:] <= 0.0) or np.any(g.data[k:] <= 0.0):
        raise ValueError("box sizes must be strictly positive")

    p_lo, p_hi = p[0:k] - p[k:] * 0.5, p[0:k] + p[k:] * 0.5
    g_lo, g_hi = g[0:k] - g[k:] * 0.5, g[0:k] + g[k:] * 0.5
    inter_len = T.maximum(T.minimum(p_hi, g_hi) - T.maximum(p_lo, g_lo), 0.0)
    inter = _prod(inter_len, k)
    union = _prod(p[k:], k) + _prod(g[k:], k) - inter
    iou = inter / union
    enclose = _prod(T.maximum(p_hi, g_hi) - T.minimum(p_lo, g_lo), k)
    return 1.0 - iou + (enclose - union) / enclose


def bbox_loss(p, g, w=LossWeights()):
    """beta_giou * GIoU + beta_l1 * L1 over the box parameter vector."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    l1 = T.absolute(p - g).sum()
    return w.beta_giou * giou_loss(p, g) + w.beta_l1 * l1


def focal_loss(probs, target, fp):
    """-alpha_t (1 - p_t)^gamma log(p_t) for one normalized distribution."""
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float64))
    if probs.ndim != 1:
        raise ValueError("probs must be a flat distribution")
    if abs(float(probs.data.sum()) - 1.0) > 1e-5:
        raise ValueError(f"probabilities sum to {probs.data.sum():.6f}, not 1")
    n = probs.shape[0]
    if not 0 <= target < n:
        raise ValueError(f"target class {target} outside [0, {n - 1}]")
    if len(fp.alpha_t) != n:
        raise ValueError(f"alpha_t has {len(fp.alpha_t)} entries for {n} classes")
    p_t = probs[target]
    log_p = T.log(T.maximum(p_t, LOG_FLOOR))
    if fp.gamma == 0.0:
        return -fp.alpha_t[target] * log_p
    return -fp.alpha_t[target] * ((1.0 - p_t) ** fp.gamma) * log_p


def _focal_mean(probs, targets, fp):
    """Vectorized focal over M queries, averaged; matches focal_loss per row."""
    m, n = probs.shape
    onehot = np.zeros((m, n))
    onehot[np.arange(m), targets] = 1.0
    p_t = (probs * Tensor(onehot)).sum(axis=1)
    alpha = Tensor(np.asarray(fp.alpha_t, dtype=np.float64)[targets])
    log_p = T.log(T.maximum(p_t, LOG_FLOOR))
    if fp.gamma == 0.0:
        return -(alpha * log_p).mean()
    return -(alpha * ((1.0 - p_t) ** fp.gamma) * log_p).mean()


# -- view decomposition on (N, 6) tensors --------------------------------

VIEW_COLUMNS = {"rad": None, "ra": (0, 1, 3, 4), "rd": (0, 2, 3, 5)}


def view_slice(boxes, view):
    """Project (N, 6) RAD boxes to a view; matches raddata.project_box."""
    if view == "rad":
        return boxes
    if view == "ra":
        return T.concat([boxes[:, 0:2], boxes[:, 3:5]], axis=1)
    if view == "rd":
        return T.concat([boxes[:, 0:1], boxes[:, 2:3], boxes[:, 3:4], boxes[:, 5:6]], axis=1)
    raise ValueError(f"unknown view {view!r}")


# -- matching cost and total loss ----------------------------------------


def _giou_loss_matrix(p, g):
    """Vectorized plain-numpy GIoU loss between (M, 2k) and (G, 2k) boxes."""
    k = p.shape[1] // 2
    p_lo, p_hi = p[:, :k] - p[:, k:] / 2, p[:, :k] + p[:, k:] / 2
    g_lo, g_hi = g[:, :k] - g[:, k:] / 2, g[:, :k] + g[:, k:] / 2
    inter = np.clip(
        np.minimum(p_hi[:, None], g_hi[None]) - np.maximum(p_lo[:, None], g_lo[None]),
        0.0, None,
    ).prod(axis=-1)
    vol_p = p[:, k:].prod(axis=1)[:, None]
    vol_g = g[:, k:].prod(axis=1)[None, :]
    union = vol_p + vol_g - inter
    iou = inter / union
    enclose = (np.maximum(p_hi[:, None], g_hi[None]) - np.minimum(p_lo[:, None], g_lo[None])).prod(axis=-1)
    return 1.0 - iou + (enclose - union) / enclose


def matching_cost_matrix(probs, boxes, gt_classes, gt_boxes, w=LossWeights()):
    """(M, G) cost: beta4*(1 - p_class) + beta_l1*L1 + beta_giou*GIoU, all RAD."""
    cls_term = 1.0 - probs[:, gt_classes]
    l1_term = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    giou_term = _giou_loss_matrix(boxes, gt_boxes)
    return w.beta4 * cls_term + w.beta_l1 * l1_term + w.beta_giou * giou_term


def total_loss(output, gts, w=LossWeights(), fp=None, assignments=None):
    """Weighted multi-view set loss, averaged over decoder layers.

    Returns (loss Tensor, breakdown dict, per-layer assignments). Passing
    ``assignments`` pins the matching (gradient checks hold it fixed);
    otherwise each layer is matched on its own predictions.
    """
    m, width = output.final_boxes.shape
    if width != BOX3D_DIMS:
        raise ValueError(f"expected (M, 6) boxes, got (M, {width})")
    num_classes = output.final_logits.shape[1] - 1
    fp = fp if fp is not None else default_focal_params(num_classes)
    g_total = len(gts)
    if g_total > m:
        raise DataError(f"frame has {g_total} objects but model has {m} queries")
    gt_boxes = np.stack([obj.box.as_vector() for obj in gts]) if g_total else np.zeros((0, 6))
    gt_classes = np.array([obj.class_id for obj in gts], dtype=np.intp)

    layer_losses = []
    used_assignments = []
    terms = {"bbox_rad": 0.0, "bbox_ra": 0.0, "bbox_rd": 0.0, "class": 0.0}
    n_layers = output.num_layers()
    for k in range(n_layers):
        logits, boxes = output.class_logits[k], output.boxes[k]
        probs = T.softmax(logits, axis=1)
        if assignments is not None:
            assign = assignments[k]
        else:
            if g_total:
                cost = matching_cost_matrix(probs.data, boxes.data, gt_classes, gt_boxes, w)
                assign = hungarian_match(cost)
            else:
                assign = MatchAssignment((), 0.0)
        used_assignments.append(assign)

        if g_total:
            matched = T.index_rows(boxes, assign.query_indices())
            targets_t = Tensor(gt_boxes)
            view_losses = {}
            for view in ("rad", "ra", "rd"):
                mp, mg = view_slice(matched, view), view_slice(targets_t, view)
                acc = None
                for i in range(g_total):
                    term = bbox_loss(mp[i, :], mg[i, :], w)
                    acc = term if acc is None else acc + term
                view_losses[view] = acc * (1.0 / g_total)
        else:
            view_losses = {v: Tensor(0.0) for v in ("rad", "ra", "rd")}

        targets = np.full(m, num_classes, dtype=np.intp)
        if g_total:
            targets[assign.query_indices()] = gt_classes
        cls_loss = _focal_mean(probs, targets, fp)

        layer = (
            w.beta1 * view_losses["rad"]
            + w.beta2 * view_losses["ra"]
            + w.beta3 * view_losses["rd"]
            + w.beta4 * cls_loss
        )
        layer_losses.append(layer)
        terms["bbox_rad"] += float(view_losses["rad"].data) / n_layers
        terms["bbox_ra"] += float(view_losses["ra"].data) / n_layers
        terms["bbox_rd"] += float(view_losses["rd"].data) / n_layers
        terms["class"] += float(cls_loss.data) / n_layers

    total = layer_losses[0]
    for extra in layer_losses[1:]:
        total = total + extra
    total = total * (1.0 / n_layers)
    terms["total"] = float(total.data)
    return total, terms, used_assignments
