"""Instance-level evaluation: pairwise overlap, optimal matching, and the
precision / recall / accuracy report.

Ground-truth and predicted instances are matched one-to-one by minimizing
total negative pairwise accuracy (voxel IoU) over the assignment; matched
pairs above the overlap threshold count as true positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import LabelVolume


@dataclass
class OverlapMatrix:
    gt_ids: list[int]
    pred_ids: list[int]
    gt_sizes: np.ndarray
    pred_sizes: np.ndarray
    pair_accuracy: np.ndarray  # dense [len(gt_ids), len(pred_ids)], IoU per pair
    intersections: np.ndarray


@dataclass
class EvalReport:
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    matching: list[tuple[int, int, float]] = field(default_factory=list)
    voxel_precision: float = 0.0
    voxel_recall: float = 0.0
    voxel_accuracy: float = 0.0
    undefined_precision: bool = False

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "matching": [[g, p, a] for g, p, a in self.matching],
            "voxel_precision": self.voxel_precision,
            "voxel_recall": self.voxel_recall,
            "voxel_accuracy": self.voxel_accuracy,
            "undefined_precision": self.undefined_precision,
        }


def format_table(report: EvalReport) -> str:
    head = f"{'Pre':>7} {'Rec':>7} {'Acc':>7}"
    row = (
        f"{100 * report.precision:7.2f} "
        f"{100 * report.recall:7.2f} "
        f"{100 * report.accuracy:7.2f}"
    )
    return head + "\n" + row


def overlap_matrix(gt: LabelVolume, pred: LabelVolume) -> OverlapMatrix:
    """Accumulate |A∩B| for every co-occurring (gt, pred) instance pair in
    one pass and derive IoU; pairs that never co-occur stay 0."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    g = gt.labels.ravel().astype(np.int64)
    p = pred.labels.ravel().astype(np.int64)
    gt_ids = np.unique(g[g > 0])
    pred_ids = np.unique(p[p > 0])
    gt_sizes = np.bincount(g, minlength=int(g.max(initial=0)) + 1)
    pred_sizes = np.bincount(p, minlength=int(p.max(initial=0)) + 1)
    acc = np.zeros((gt_ids.size, pred_ids.size))
    inter = np.zeros_like(acc)
    both = (g > 0) & (p > 0)
    if both.any():
        stride = int(p.max()) + 1
        keys, counts = np.unique(g[both] * stride + p[both], return_counts=True)
        rows = np.searchsorted(gt_ids, keys // stride)
        cols = np.searchsorted(pred_ids, keys % stride)
        inter[rows, cols] = counts
        union = gt_sizes[gt_ids][rows] + pred_sizes[pred_ids][cols] - counts
        acc[rows, cols] = counts / union
    return OverlapMatrix(
        gt_ids=[int(i) for i in gt_ids],
        pred_ids=[int(i) for i in pred_ids],
        gt_sizes=gt_sizes[gt_ids].astype(np.int64),
        pred_sizes=pred_sizes[pred_ids].astype(np.int64),
        pair_accuracy=acc,
        intersections=inter,
    )


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square matrix via potentials.

    Returns col_of_row. O(n^3), tolerant of negative entries.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=np.int64)  # row matched to each column
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            cand = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cand < minv[1:])
            minv[1:][better] = cand[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[match_row[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[match_row[j] - 1] = j - 1
    return col_of_row


def _optimal(cost: np.ndarray) -> tuple[dict[int, int], float]:
    """Optimal assignment of min(R, C) pairs on a rectangular matrix."""
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return {}, 0.0
    n = max(rows, cols)
    padded = np.zeros((n, n))
    padded[:rows, :cols] = cost
    col_of_row = _solve_square(padded)
    pairs = {i: int(col_of_row[i]) for i in range(rows) if col_of_row[i] < cols}
    total = float(sum(cost[i, j] for i, j in pairs.items()))
    return pairs, total


def hungarian(cost: np.ndarray) -> dict[int, int]:
    """Minimum-total-cost one-to-one assignment of min(rows, cols) pairs.

    Among cost-optimal assignments, returns the lexicographically smallest
    row-to-column map (unassigned rows sort last). Rectangular matrices are
    padded internally.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return {}
    _, best = _optimal(cost)
    tol = 1e-9 * max(1.0, abs(best))
    assign: dict[int, int] = {}
    used = np.zeros(cols, dtype=bool)
    need = min(rows, cols)
    fixed = 0.0
    for i in range(rows):
        remaining = need - len(assign)
        if remaining == 0:
            break
        rows_after = rows - i - 1
        placed = False
        for j in np.flatnonzero(~used):
            if rows_after < remaining - 1:
                break
            sub = cost[np.ix_(range(i + 1, rows), np.flatnonzero(~used & (np.arange(cols) != j)))]
            _, subtotal = _optimal(sub)
            if fixed + cost[i, j] + subtotal <= best + tol:
                assign[i] = int(j)
                used[j] = True
                fixed += cost[i, j]
                placed = True
                break
        if not placed and rows_after < remaining:
            raise AssertionError("assignment refinement lost feasibility")
    return assign


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _largest_instance(gt: LabelVolume) -> LabelVolume:
    ids, counts = np.unique(gt.labels[gt.labels > 0], return_counts=True)
    if ids.size == 0:
        return gt
    best = ids[np.lexsort((ids, -counts))[0]]
    kept = np.where(gt.labels == best, gt.labels, 0)
    return LabelVolume(labels=kept.astype(gt.labels.dtype), voxel_size_nm=gt.voxel_size_nm)


def evaluate(
    gt: LabelVolume,
    pred: LabelVolume,
    match_threshold: float = 0.0,
    largest_only: bool = False,
) -> EvalReport:
    """Match instances and report instance-level precision/recall/accuracy.

    TP are matched pairs with pairwise accuracy strictly above
    match_threshold; FP and FN are the remaining predicted and ground-truth
    instances. With largest_only, the ground truth is restricted to its
    largest instance before matching. Voxel-level scores aggregate over the
    matched pairs.
    """
    if largest_only:
        gt = _largest_instance(gt)
    ov = overlap_matrix(gt, pred)
    n_gt, n_pred = len(ov.gt_ids), len(ov.pred_ids)
    matched: list[tuple[int, int, float]] = []
    vox_inter = vox_pred = vox_gt = 0
    if n_gt and n_pred:
        pairs = hungarian(-ov.pair_accuracy)
        for i in sorted(pairs):
            j = pairs[i]
            acc = float(ov.pair_accuracy[i, j])
            if acc > match_threshold:
                matched.append((ov.gt_ids[i], ov.pred_ids[j], acc))
                vox_inter += int(ov.intersections[i, j])
                vox_pred += int(ov.pred_sizes[j])
                vox_gt += int(ov.gt_sizes[i])
    tp = len(matched)
    fp = n_pred - tp
    fn = n_gt - tp
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    accuracy = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 0.0
    vox_union = vox_gt + vox_pred - vox_inter
    return EvalReport(
        precision=precision,
        recall=recall,
        accuracy=accuracy,
        tp=tp,
        fp=fp,
        fn=fn,
        matching=matched,
        voxel_precision=vox_inter / vox_pred if vox_pred else 0.0,
        voxel_recall=vox_inter / vox_gt if vox_gt else 0.0,
        voxel_accuracy=vox_inter / vox_union if vox_union else 0.0,
        undefined_precision=(tp + fp) == 0,
    )
