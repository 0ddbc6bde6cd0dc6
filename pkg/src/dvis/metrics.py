"""Tracking-quality metrics on slot-indexed mask predictions.

Predictions are ``[T, N, P]`` boolean masks (slot ``n`` is a persistent
track); ground truth is ``[G, T, P]``. Per frame, visible ground-truth
instances are matched to slots by maximum-IoU assignment and a pair counts
only at IoU >= ``iou_threshold``.
"""
from __future__ import annotations

import numpy as np

from .assignment import hungarian_min


def mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boolean mask sets ``[A, P]`` and ``[B, P]``."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def frame_matches(pred: np.ndarray, gt: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """``[G, T]`` slot matched to each GT instance per frame, -1 if none/absent."""
    T = pred.shape[0]
    G = gt.shape[0]
    out = np.full((G, T), -1, dtype=np.int64)
    for t in range(T):
        vis = np.flatnonzero(gt[:, t].any(axis=1))
        if vis.size == 0:
            continue
        iou = mask_iou(gt[vis, t], pred[t])
        if iou.shape[0] <= iou.shape[1]:
            mapping = hungarian_min(-iou).mapping
            rows, cols = np.arange(len(vis)), mapping
        else:
            mapping = hungarian_min(-iou.T).mapping
            rows, cols = mapping, np.arange(iou.shape[1])
        ok = iou[rows, cols] >= iou_threshold
        out[vis[rows[ok]], t] = cols[ok]
    return out


def id_switches(matches: np.ndarray) -> int:
    """Frames where an instance's matched slot differs from its last matched slot."""
    count = 0
    for row in matches:
        seen = row[row >= 0]
        if seen.size > 1:
            count += int((seen[1:] != seen[:-1]).sum())
    return count


def association_accuracy(matches: np.ndarray, visible: np.ndarray) -> float:
    """Fraction of visible instance-frames matched to the instance's modal slot."""
    hits = 0
    total = int(visible.sum())
    for row, vis in zip(matches, visible):
        seen = row[vis & (row >= 0)]
        if seen.size:
            counts = np.bincount(seen)
            hits += int(counts.max())
    return hits / total if total else 1.0


def mean_frame_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU over visible instance-frames under per-frame optimal matching."""
    T = pred.shape[0]
    vals = []
    for t in range(T):
        vis = np.flatnonzero(gt[:, t].any(axis=1))
        if vis.size == 0:
            continue
        iou = mask_iou(gt[vis, t], pred[t])
        if iou.shape[0] <= iou.shape[1]:
            mapping = hungarian_min(-iou).mapping
            vals.extend(iou[np.arange(len(vis)), mapping])
        else:
            mapping = hungarian_min(-iou.T).mapping
            best = np.zeros(len(vis))
            best[mapping] = iou[mapping, np.arange(iou.shape[1])]
            vals.extend(best)
    return float(np.mean(vals)) if vals else 1.0


def tube_iou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """``[N, G]`` tube IoU: summed intersections over summed unions across frames."""
    p = pred.astype(np.float64)  # [T, N, P]
    g = gt.astype(np.float64)  # [G, T, P]
    inter = np.einsum("tnp,gtp->ng", p, g)
    union = p.sum(axis=(0, 2))[:, None] + g.sum(axis=(1, 2))[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def average_precision(
    scores: np.ndarray,
    labels: np.ndarray,
    iou: np.ndarray,
    gt_labels: np.ndarray,
    threshold: float,
) -> float:
    """All-point interpolated AP of score-ranked predictions.

    Predictions are visited by descending score (ties: lower index first); each
    takes the unclaimed same-class ground truth with the highest IoU at or
    above ``threshold`` as a true positive.
    """
    G = len(gt_labels)
    if G == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    claimed = np.zeros(G, dtype=bool)
    tp = np.zeros(len(order))
    for rank, n in enumerate(order):
        cand = np.flatnonzero((gt_labels == labels[n]) & ~claimed & (iou[n] >= threshold))
        if cand.size:
            g = cand[np.argmax(iou[n, cand])]
            claimed[g] = True
            tp[rank] = 1.0
    if not tp.any():
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / G
    # Interpolate: precision at each recall level is the max precision to its right.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))
