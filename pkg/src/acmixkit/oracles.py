"""Slow reference implementations used to cross-check the fast paths.

Each oracle takes a different route from the code it checks: explicit loops
instead of patch matrices or shifts, threshold enumeration instead of
cumulative sums, pixel counting instead of interval arithmetic.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .boxes import BBox, Detection, GroundTruth


def conv2d_loops(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Convolution by explicit loops over output pixels and kernel taps (float64)."""
    n, c, h, w = x.shape
    co, ci, k, _ = weights.shape
    pad = k // 2 if pad is None else pad
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    x64, w64 = x.astype(np.float64), weights.astype(np.float64)
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                acc = np.zeros(co) if bias is None else bias.astype(np.float64).copy()
                for p in range(k):
                    for q in range(k):
                        r, s = i * stride + p - pad, j * stride + q - pad
                        if 0 <= r < h and 0 <= s < w:
                            acc += w64[:, :, p, q] @ x64[b, :, r, s]
                out[b, :, i, j] = acc
    return out


def batchnorm_loops(x: np.ndarray, gamma, beta, mean, var, eps: float) -> np.ndarray:
    out = np.empty(x.shape)
    for c in range(x.shape[1]):
        out[:, c] = (x[:, c].astype(np.float64) - mean[c]) / math.sqrt(float(var[c]) + eps) * gamma[c] + beta[c]
    return out


def sigmoid_scalar(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def iou_pixel_count(a: BBox, b: BBox) -> float:
    """IoU of integer-corner boxes by counting unit cells."""
    xs = range(int(min(a.x1, b.x1)), int(max(a.x2, b.x2)))
    ys = range(int(min(a.y1, b.y1)), int(max(a.y2, b.y2)))
    inter = union = 0
    for x in xs:
        for y in ys:
            in_a = a.x1 <= x < a.x2 and a.y1 <= y < a.y2
            in_b = b.x1 <= x < b.x2 and b.y1 <= y < b.y2
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


def _greedy_tp(dets: Sequence[Detection], gts: Sequence[GroundTruth], thr: float) -> list[bool]:
    from .boxes import iou_xyxy

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    used: set[int] = set()
    flags = [False] * len(dets)
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if j in used or g.image_id != d.image_id or g.class_id != d.class_id:
                continue
            v = iou_xyxy(d.bbox, g.bbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            used.add(best)
            flags[i] = True
    return flags


def ap_threshold_enumeration(dets: Sequence[Detection], gts: Sequence[GroundTruth], thr: float) -> float:
    """Single-class AP: rerun matching for every distinct confidence cut, then
    integrate the interpolated precision over the distinct recall levels."""
    n_gt = len(gts)
    if n_gt == 0:
        raise ValueError("no ground truth")
    pr = []
    for t in sorted({d.confidence for d in dets}, reverse=True):
        kept = [d for d in dets if d.confidence >= t]
        tp = sum(_greedy_tp(kept, gts, thr))
        pr.append((tp / n_gt, tp / len(kept)))
    levels = sorted({0.0} | {r for r, _ in pr})
    area = 0.0
    for lo, hi in zip(levels, levels[1:]):
        area += (hi - lo) * max(p for r, p in pr if r >= hi)
    return area
