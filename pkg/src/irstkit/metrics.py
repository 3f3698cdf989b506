"""Pixel- and target-level detection metrics.

Pixel scores (IoU, F1) use dataset-global confusion counts. Target scores use
8-connected components: a ground-truth target counts as detected when a
predicted component overlaps it by at least one pixel or has its centroid
within the match radius; predictions and targets are paired one-to-one,
greedily by centroid distance. Fa is the pixel count of unmatched predicted
components over all image pixels (reported x1e6 in CSV output).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_STRUCT8 = np.ones((3, 3), dtype=np.int32)


@dataclass
class TargetComponent:
    pixels: np.ndarray          # (n, 2) row/col indices
    centroid: tuple[float, float]
    area: int


@dataclass
class EvalReport:
    iou: float
    f1: float
    pd: float
    fa: float                   # false-alarm pixels per image pixel (raw rate)
    tp: int
    fp: int
    fn: int
    detected_targets: int
    total_targets: int
    false_alarm_pixels: int
    total_pixels: int


def _as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    u = np.unique(m)
    if not np.isin(u, (0, 1)).all():
        raise ValueError("mask values must be 0/1")
    return m.astype(np.uint8)


def pixel_metrics(preds, gts) -> tuple[float, float]:
    """Dataset-global IoU and F1 over matched lists of binary masks."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    tp = fp = fn = 0
    for p, g in zip(preds, gts):
        p = _as_binary(p)
        g = _as_binary(g)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        tp += int(np.sum((p == 1) & (g == 1)))
        fp += int(np.sum((p == 1) & (g == 0)))
        fn += int(np.sum((p == 0) & (g == 1)))
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    return iou, f1


def connected_components(mask) -> list[TargetComponent]:
    """8-connected components ordered by their topmost-leftmost pixel."""
    m = _as_binary(mask)
    labels, count = ndimage.label(m, structure=_STRUCT8)
    comps = []
    for k in range(1, count + 1):
        rows, cols = np.nonzero(labels == k)
        comps.append(
            TargetComponent(
                pixels=np.stack([rows, cols], axis=1),
                centroid=(float(rows.mean()), float(cols.mean())),
                area=int(rows.size),
            )
        )
    comps.sort(
        key=lambda c: (
            int(c.pixels[:, 0].min()),
            int(c.pixels[c.pixels[:, 0] == c.pixels[:, 0].min(), 1].min()),
        )
    )
    return comps


def _greedy_match(pred_labels, n_pred, gt_labels, n_gt, match_radius):
    """One-to-one greedy matching; returns (matched gt set, matched pred set)."""
    if n_pred == 0 or n_gt == 0:
        return set(), set()
    ones = np.ones_like(pred_labels)
    pred_cent = ndimage.center_of_mass(ones, pred_labels, index=np.arange(1, n_pred + 1))
    gt_cent = ndimage.center_of_mass(ones, gt_labels, index=np.arange(1, n_gt + 1))
    joint = np.zeros((n_pred + 1, n_gt + 1), dtype=np.int64)
    np.add.at(joint, (pred_labels.ravel(), gt_labels.ravel()), 1)

    candidates = []
    for pi in range(n_pred):
        for gi in range(n_gt):
            dist = float(np.hypot(pred_cent[pi][0] - gt_cent[gi][0],
                                  pred_cent[pi][1] - gt_cent[gi][1]))
            if joint[pi + 1, gi + 1] >= 1 or dist <= match_radius:
                candidates.append((dist, gi, pi))
    candidates.sort()

    used_pred: set[int] = set()
    used_gt: set[int] = set()
    for _, gi, pi in candidates:
        if pi in used_pred or gi in used_gt:
            continue
        used_pred.add(pi)
        used_gt.add(gi)
    return used_gt, used_pred


def _match_image(pred_mask, gt_mask, match_radius: float):
    """One image: (detected gt count, total gt count, unmatched pred pixels)."""
    pred_labels, n_pred = ndimage.label(_as_binary(pred_mask), structure=_STRUCT8)
    gt_labels, n_gt = ndimage.label(_as_binary(gt_mask), structure=_STRUCT8)
    used_gt, used_pred = _greedy_match(pred_labels, n_pred, gt_labels, n_gt, match_radius)
    if n_pred:
        areas = ndimage.sum_labels(np.ones_like(pred_labels), pred_labels,
                                   index=np.arange(1, n_pred + 1)).astype(int)
        fa_pixels = int(sum(areas[pi] for pi in range(n_pred) if pi not in used_pred))
    else:
        fa_pixels = 0
    return len(used_gt), n_gt, fa_pixels


def target_metrics(preds, gts, match_radius: float = 3.0) -> tuple[float, float]:
    """Detection probability and false-alarm pixel rate over a dataset."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    detected = total = fa_pixels = total_pixels = 0
    for p, g in zip(preds, gts):
        d, t, fa = _match_image(p, g, match_radius)
        detected += d
        total += t
        fa_pixels += fa
        total_pixels += int(np.asarray(g).size)
    pd = detected / total if total else 1.0
    fa = fa_pixels / total_pixels if total_pixels else 0.0
    return pd, fa


def evaluate_masks(preds, gts, match_radius: float = 3.0) -> EvalReport:
    """Full report from matched lists of binary masks."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    tp = fp = fn = 0
    detected = total = fa_pixels = total_pixels = 0
    for p, g in zip(preds, gts):
        pb, gb = _as_binary(p), _as_binary(g)
        if pb.shape != gb.shape:
            raise ValueError(f"shape mismatch {pb.shape} vs {gb.shape}")
        tp += int(np.sum((pb == 1) & (gb == 1)))
        fp += int(np.sum((pb == 1) & (gb == 0)))
        fn += int(np.sum((pb == 0) & (gb == 1)))
        d, t, fa = _match_image(pb, gb, match_radius)
        detected += d
        total += t
        fa_pixels += fa
        total_pixels += gb.size
    denom = tp + fp + fn
    return EvalReport(
        iou=tp / denom if denom else 1.0,
        f1=2 * tp / (2 * tp + fp + fn) if denom else 1.0,
        pd=detected / total if total else 1.0,
        fa=fa_pixels / total_pixels if total_pixels else 0.0,
        tp=tp, fp=fp, fn=fn,
        detected_targets=detected, total_targets=total,
        false_alarm_pixels=fa_pixels, total_pixels=total_pixels,
    )


def roc_sweep(prob_maps, gts, thresholds) -> list[tuple[float, float, float]]:
    """(threshold, pd, fa) points over strictly descending thresholds.

    Detection is accumulated across the sweep (once a target is found at some
    threshold it stays found at lower ones) and the false-alarm rate is the
    pixel-level false-positive rate, so both curves are monotone
    non-decreasing as the threshold drops.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in [0,1]")
    if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly descending")
    if len(prob_maps) != len(gts):
        raise ValueError(f"got {len(prob_maps)} maps for {len(gts)} ground truths")

    gt_bin = [_as_binary(g) for g in gts]
    gt_labeled = [ndimage.label(g, structure=_STRUCT8) for g in gt_bin]
    total_targets = sum(n for _, n in gt_labeled)
    total_pixels = sum(g.size for g in gt_bin)

    detected: list[set[int]] = [set() for _ in gt_bin]
    points = []
    for t in thresholds:
        fp_pixels = 0
        for i, (prob, g) in enumerate(zip(prob_maps, gt_bin)):
            pm = (np.asarray(prob) > t).astype(np.uint8)
            fp_pixels += int(np.sum((pm == 1) & (g == 0)))
            glab, n_gt = gt_labeled[i]
            if n_gt == 0 or not pm.any():
                continue
            plab, n_pred = ndimage.label(pm, structure=_STRUCT8)
            hit, _ = _greedy_match(plab, n_pred, glab, n_gt, 3.0)
            detected[i] |= hit
        pd = (sum(len(s) for s in detected) / total_targets) if total_targets else 1.0
        fa = fp_pixels / total_pixels if total_pixels else 0.0
        points.append((t, pd, fa))
    return points
