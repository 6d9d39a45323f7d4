"""Segmentation evaluation: voxel overlap scores (Jaccard, DSC), the
instance IoU matrix, and 3D average precision at IoU 0.75.

AP uses score-ordered greedy matching (each prediction takes the unmatched
ground-truth instance of highest IoU if that IoU clears the threshold) and
all-points interpolation of the precision-recall curve, so it is invariant
under any strictly monotone transformation of the scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .postproc import LabelVolume


@dataclass
class MetricReport:
    ap75: float
    jaccard: float
    dsc: float
    iou_matrix: np.ndarray
    matches: list = field(default_factory=list)  # (pred_id, gt_id, iou) triples

    def to_dict(self):
        return {
            "ap75": self.ap75,
            "jaccard": self.jaccard,
            "dsc": self.dsc,
            "iou_matrix": self.iou_matrix.tolist(),
            "matches": [{"pred": int(p), "gt": int(g), "iou": float(i)} for p, g, i in self.matches],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def jaccard_dsc(pred, gt):
    """Voxel overlap of two binary masks; both-empty counts as perfect."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes disagree: {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    p, g = int(np.count_nonzero(pred)), int(np.count_nonzero(gt))
    union = p + g - inter
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / (p + g)


def iou_matrix(pred: LabelVolume, gt: LabelVolume):
    """Pairwise instance IoU, entry (i, j) for pred i+1 vs gt j+1, computed
    from one contingency-table sweep."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(f"label volumes disagree in shape: {pred.labels.shape} vs {gt.labels.shape}")
    n_p, n_g = pred.instance_count, gt.instance_count
    if n_p == 0 or n_g == 0:
        return np.zeros((n_p, n_g))
    pl = pred.labels.ravel().astype(np.int64)
    gl = gt.labels.ravel().astype(np.int64)
    codes = pl * (n_g + 1) + gl
    counts = np.bincount(codes, minlength=(n_p + 1) * (n_g + 1)).reshape(n_p + 1, n_g + 1)
    inter = counts[1:, 1:].astype(np.float64)
    p_sizes = counts[1:, :].sum(axis=1, keepdims=True)
    g_sizes = counts[:, 1:].sum(axis=0, keepdims=True)
    union = p_sizes + g_sizes - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def greedy_match(iou, scores, iou_threshold=0.75):
    """Score-descending greedy assignment.

    Returns (order, hits, matches): the prediction visit order, a boolean
    TP flag per visited prediction, and accepted (pred_id, gt_id, iou)
    triples (ids are 1-based). Score ties break toward the smaller pred id.
    """
    n_p, n_g = iou.shape
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n_p,):
        raise ValueError(f"need one score per predicted instance: {scores.shape} vs {n_p} predictions")
    order = np.lexsort((np.arange(n_p), -scores))
    taken = np.zeros(n_g, dtype=bool)
    hits = np.zeros(n_p, dtype=bool)
    matches = []
    for rank, i in enumerate(order):
        row = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(row)) if n_g else -1
        if n_g and row[j] >= iou_threshold:
            taken[j] = True
            hits[rank] = True
            matches.append((int(i) + 1, j + 1, float(iou[i, j])))
    return order, hits, matches


def average_precision(hits, n_gt):
    """All-points interpolated AP from ordered TP flags."""
    if n_gt == 0:
        return 1.0 if len(hits) == 0 else 0.0
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    recall = tp / n_gt
    precision = tp / np.arange(1, len(hits) + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * env))


def ap75(pred: LabelVolume, scores, gt: LabelVolume, iou_threshold=0.75):
    """3D average precision at the given IoU threshold."""
    iou = iou_matrix(pred, gt)
    _, hits, _ = greedy_match(iou, scores, iou_threshold)
    return average_precision(hits, gt.instance_count)


def evaluate(pred: LabelVolume, gt: LabelVolume, scores=None) -> MetricReport:
    """Full report; scores default to all-ones (greedy order by pred id)."""
    if scores is None:
        scores = np.ones(pred.instance_count)
    iou = iou_matrix(pred, gt)
    _, hits, matches = greedy_match(iou, scores)
    ap = average_precision(hits, gt.instance_count)
    j, d = jaccard_dsc(pred.labels > 0, gt.labels > 0)
    return MetricReport(ap75=ap, jaccard=j, dsc=d, iou_matrix=iou, matches=matches)
