"""Detection evaluation: matching, precision/recall, AP, mAP, confusion matrix, FPS."""
from __future__ import annotations

import csv
import json
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .boxes import BBox, Detection, GroundTruth, iou_matrix, iou_xyxy

__all__ = [
    "BBox", "Detection", "GroundTruth", "MatchCounts", "PRPoint", "EvalReport", "iou_xyxy",
    "match_detections", "precision", "recall", "pr_curve", "average_precision", "mean_ap",
    "map_at", "map_sweep", "confusion_matrix", "normalize_rows", "evaluate", "fps_benchmark",
    "SWEEP_THRESHOLDS",
]

SWEEP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


class PRPoint(NamedTuple):
    precision: float
    recall: float
    confidence: float


def _group(items: Iterable, key) -> dict:
    out = defaultdict(list)
    for idx, item in enumerate(items):
        out[key(item)].append(idx)
    return out


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float) -> tuple[dict[int, MatchCounts], list[bool]]:
    """Greedy one-to-one matching per (image, class).

    Detections are visited by confidence (descending, ties by input index);
    each takes the still-unmatched ground truth with the highest IoU, provided
    that IoU is >= ``iou_threshold``. Returns per-class counts and a TP flag
    per detection.
    """
    flags = [False] * len(dets)
    counts: dict[int, MatchCounts] = defaultdict(MatchCounts)
    gt_groups = _group(gts, lambda g: (g.image_id, g.class_id))
    det_groups = _group(dets, lambda d: (d.image_id, d.class_id))
    for key in sorted(set(gt_groups) | set(det_groups)):
        d_idx = sorted(det_groups.get(key, []), key=lambda i: (-dets[i].confidence, i))
        g_idx = gt_groups.get(key, [])
        matched = np.zeros(len(g_idx), dtype=bool)
        if d_idx and g_idx:
            ious = iou_matrix([dets[i].bbox for i in d_idx], [gts[j].bbox for j in g_idx])
        c = counts[key[1]]
        for row, i in enumerate(d_idx):
            if g_idx:
                cand = np.where(matched, -1.0, ious[row])
                best = int(cand.argmax())
                if cand[best] >= iou_threshold:
                    matched[best] = True
                    flags[i] = True
                    c.tp += 1
                    continue
            c.fp += 1
        c.fn += int((~matched).sum())
    return dict(counts), flags


def precision(counts: MatchCounts) -> float:
    """TP / (TP + FP); 1.0 when nothing was predicted."""
    denom = counts.tp + counts.fp
    return counts.tp / denom if denom else 1.0


def recall(counts: MatchCounts) -> float:
    """TP / (TP + FN); 0.0 when there is nothing to find."""
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 0.0


def pr_curve(confidences: Sequence[float], tp_flags: Sequence[bool], n_gt: int) -> list[PRPoint]:
    """One point per distinct confidence level, highest confidence first.

    Detections sharing a confidence are admitted together, so the curve
    depends only on the ranking, not on tie order.
    """
    if n_gt <= 0:
        raise ValueError("a PR curve needs at least one ground-truth instance")
    conf = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    conf = conf[order]
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64)[order])
    fp = np.cumsum(1 - np.asarray(tp_flags, dtype=np.int64)[order])
    points = []
    for i in range(len(conf)):
        if i + 1 < len(conf) and conf[i + 1] == conf[i]:
            continue
        points.append(PRPoint(tp[i] / (tp[i] + fp[i]), tp[i] / n_gt, float(conf[i])))
    return points


def average_precision(points: Sequence[PRPoint]) -> float:
    """Area under the monotone precision envelope, anchored at (recall 0, precision 1)."""
    if not points:
        return 0.0
    rec = np.concatenate([[0.0], [p.recall for p in points]])
    prec = np.concatenate([[1.0], [p.precision for p in points]])
    # Envelope: best precision achievable at this recall or beyond.
    env = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum((rec[1:] - rec[:-1]) * env[1:]))


def mean_ap(per_class_ap: dict[int, float]) -> float:
    if not per_class_ap:
        raise ValueError("no class with ground truth to average over")
    return float(sum(per_class_ap.values()) / len(per_class_ap))


def class_aps(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float
              ) -> tuple[dict[int, float], dict[int, list[PRPoint]], dict[int, MatchCounts]]:
    """Per-class AP for every class with at least one ground-truth box."""
    counts, flags = match_detections(dets, gts, iou_threshold)
    gt_per_class = defaultdict(int)
    for g in gts:
        gt_per_class[g.class_id] += 1
    aps, curves = {}, {}
    for cls in sorted(gt_per_class):
        idx = [i for i, d in enumerate(dets) if d.class_id == cls]
        pts = pr_curve([dets[i].confidence for i in idx], [flags[i] for i in idx], gt_per_class[cls])
        curves[cls] = pts
        aps[cls] = average_precision(pts)
    return aps, curves, counts


def map_at(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float) -> float:
    return mean_ap(class_aps(dets, gts, iou_threshold)[0])


def map_sweep(dets: Sequence[Detection], gts: Sequence[GroundTruth],
              thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> float:
    return float(np.mean([map_at(dets, gts, t) for t in thresholds]))


def confusion_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int,
                     iou_threshold: float = 0.5, conf_threshold: float = 0.0) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class.

    Index ``num_classes`` is background: its row holds unmatched detections,
    its column unmatched ground truth. Pairs are matched one-to-one per image
    by IoU alone, class labels ignored.
    """
    m = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    bg = num_classes
    dets = [d for d in dets if d.confidence >= conf_threshold]
    for cls in {d.class_id for d in dets} | {g.class_id for g in gts}:
        if not 0 <= cls < num_classes:
            raise ValueError(f"class id {cls} outside [0, {num_classes})")
    gt_by_img = _group(gts, lambda g: g.image_id)
    det_by_img = _group(dets, lambda d: d.image_id)
    for img in sorted(set(gt_by_img) | set(det_by_img)):
        d_idx = sorted(det_by_img.get(img, []), key=lambda i: (-dets[i].confidence, i))
        g_idx = gt_by_img.get(img, [])
        matched = np.zeros(len(g_idx), dtype=bool)
        if d_idx and g_idx:
            ious = iou_matrix([dets[i].bbox for i in d_idx], [gts[j].bbox for j in g_idx])
        for row, i in enumerate(d_idx):
            pred = dets[i].class_id
            if g_idx:
                cand = np.where(matched, -1.0, ious[row])
                best = int(cand.argmax())
                if cand[best] >= iou_threshold:
                    matched[best] = True
                    m[gts[g_idx[best]].class_id, pred] += 1
                    continue
            m[bg, pred] += 1
        for j, hit in zip(g_idx, matched):
            if not hit:
                m[gts[j].class_id, bg] += 1
    return m


def normalize_rows(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True).astype(np.float64)
    return np.divide(m, sums, out=np.zeros(m.shape), where=sums > 0)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map50: float
    map50_95: float
    confusion: np.ndarray
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    curves: dict[int, list[PRPoint]] = field(default_factory=dict)
    iou_threshold: float = 0.5
    iou_mode: str = "sweep"
    fps: float | None = None

    def to_json(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "iou_mode": self.iou_mode,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "map50": self.map50,
            "map50_95": self.map50_95,
            "confusion": self.confusion.tolist(),
            "fps": self.fps,
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        for cls, pts in self.curves.items():
            with open(out / f"pr_class{cls}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["confidence", "precision", "recall"])
                w.writerows((p.confidence, p.precision, p.recall) for p in pts)
        with open(out / "confusion.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(self.confusion.tolist())


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int,
             iou_threshold: float = 0.5, iou_mode: str = "sweep", conf_threshold: float = 0.0) -> EvalReport:
    """``iou_mode`` picks how the strict figure is read: the 0.50:0.95 sweep or IoU 0.95 alone."""
    if iou_mode not in ("sweep", "single"):
        raise ValueError(f"unknown iou_mode {iou_mode!r}")
    aps, curves, counts = class_aps(dets, gts, iou_threshold)
    strict = map_sweep(dets, gts) if iou_mode == "sweep" else map_at(dets, gts, 0.95)
    classes = sorted(aps)
    return EvalReport(
        per_class_ap=aps, map50=mean_ap(aps), map50_95=strict,
        confusion=confusion_matrix(dets, gts, num_classes, iou_threshold, conf_threshold),
        precision={c: precision(counts.get(c, MatchCounts())) for c in classes},
        recall={c: recall(counts.get(c, MatchCounts())) for c in classes},
        curves=curves, iou_threshold=iou_threshold, iou_mode=iou_mode,
    )


class BenchResult(NamedTuple):
    fps: float
    cv: float
    times: list[float]


def fps_benchmark(model, input_size: int | None = None, warmup: int = 10, iters: int = 100,
                  seed: int = 0) -> BenchResult:
    """Time single-image forward passes; warmup passes are run but not counted."""
    if iters < 10:
        raise ValueError("iters must be >= 10")
    size = input_size or model.cfg.input_size
    img = np.random.default_rng(seed).random((1, 3, size, size), dtype=np.float32)
    for _ in range(warmup):
        model.forward(img)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        model.forward(img)
        times.append(time.perf_counter() - t0)
    if min(times) < 1e-6:
        raise RuntimeError("timer resolution insufficient: an iteration took < 1 us")
    arr = np.asarray(times)
    return BenchResult(iters / arr.sum(), float(arr.std() / arr.mean()), times)
