"""
Segmentation and state metrics.

Label maps are integer arrays; ground-truth label 0 is background. ``ari`` uses the
contingency-table formula, ``mean_iou`` matches predicted to ground-truth regions
one-to-one with the Hungarian algorithm. Frames without any target pixels score
NaN and are skipped by the aggregations.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np
import scipy.optimize
import torch

from core.errors import ShapeMismatchError

METRIC_NAMES = ("miou", "miou_fg", "ari", "ari_fg")


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _flat_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError("label maps differ in shape", got=list(pred.shape), expected=list(gt.shape))
    return pred.reshape(-1).astype(np.int64), gt.reshape(-1).astype(np.int64)


def contingency_table(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Counts ``[n_gt_labels, n_pred_labels]`` of co-occurring labels."""
    _, gt_idx = np.unique(gt, return_inverse=True)
    _, pred_idx = np.unique(pred, return_inverse=True)
    table = np.zeros((gt_idx.max(initial=-1) + 1, pred_idx.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (gt_idx, pred_idx), 1)
    return table


def _pairs(counts: np.ndarray) -> float:
    counts = counts.astype(np.float64)
    return float((counts * (counts - 1) / 2).sum())


def ari(pred, gt, foreground_only: bool = False) -> float:
    """Adjusted Rand index between two pixel partitions.

    When the index is undefined (both partitions trivial after filtering) the
    result is 1.0 for identical partitions and 0.0 otherwise.
    """
    pred, gt = _flat_pair(pred, gt)
    if foreground_only:
        keep = gt != 0
        pred, gt = pred[keep], gt[keep]
    n = pred.size
    if n == 0:
        return float("nan")

    table = contingency_table(pred, gt)
    sum_cells = _pairs(table)
    sum_gt = _pairs(table.sum(axis=1))
    sum_pred = _pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = sum_gt * sum_pred / total if total else 0.0
    maximum = (sum_gt + sum_pred) / 2
    if maximum == expected:
        identical = np.count_nonzero(table) == table.shape[0] == table.shape[1]
        return 1.0 if identical else 0.0
    return float((sum_cells - expected) / (maximum - expected))


def iou_matrix(pred: np.ndarray, gt: np.ndarray, gt_labels: np.ndarray, pred_labels: np.ndarray) -> np.ndarray:
    gt_masks = gt[None, :] == gt_labels[:, None]
    pred_masks = pred[None, :] == pred_labels[:, None]
    inter = gt_masks.astype(np.int64) @ pred_masks.T.astype(np.int64)
    union = gt_masks.sum(axis=1)[:, None] + pred_masks.sum(axis=1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def mean_iou(pred, gt, foreground_only: bool = False) -> float:
    """Mean IoU over ground-truth classes under an optimal one-to-one matching.

    Unmatched ground-truth classes count as 0. ``foreground_only`` drops the
    background class from the targets; predicted labels are kept as they are.
    """
    pred, gt = _flat_pair(pred, gt)
    gt_labels = np.unique(gt)
    if foreground_only:
        gt_labels = gt_labels[gt_labels != 0]
    if gt_labels.size == 0:
        return float("nan")
    pred_labels = np.unique(pred)
    ious = iou_matrix(pred, gt, gt_labels, pred_labels)
    rows, cols = scipy.optimize.linear_sum_assignment(ious, maximize=True)
    return float(ious[rows, cols].sum() / gt_labels.size)


def state_mae(pred_states, gt_states, active: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-frame mean absolute error over objects and the 6 state components.

    ``active`` (``[K]`` bool) restricts the mean to slots bound to real objects.
    """
    pred, gt = _as_numpy(pred_states).astype(np.float64), _as_numpy(gt_states).astype(np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 6:
        raise ShapeMismatchError("state arrays must share shape [T, K, 6]", got=list(pred.shape), expected=list(gt.shape))
    err = np.abs(pred - gt)
    if active is not None:
        err = err[:, _as_numpy(active).astype(bool)]
    return err.mean(axis=(1, 2))


def frame_scores(pred_seg, gt_seg) -> Dict[str, np.ndarray]:
    """All four segmentation metrics per frame for ``[T, H, W]`` label maps (unit scale)."""
    pred_seg, gt_seg = _as_numpy(pred_seg), _as_numpy(gt_seg)
    if pred_seg.shape != gt_seg.shape:
        raise ShapeMismatchError("segmentation videos differ in shape", got=list(pred_seg.shape), expected=list(gt_seg.shape))
    scores = {name: np.empty(pred_seg.shape[0]) for name in METRIC_NAMES}
    for t in range(pred_seg.shape[0]):
        scores["miou"][t] = mean_iou(pred_seg[t], gt_seg[t])
        scores["miou_fg"][t] = mean_iou(pred_seg[t], gt_seg[t], foreground_only=True)
        scores["ari"][t] = ari(pred_seg[t], gt_seg[t])
        scores["ari_fg"][t] = ari(pred_seg[t], gt_seg[t], foreground_only=True)
    return scores
