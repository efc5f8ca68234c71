"""Anchor boxes: K-means++ clustering of box sizes under the 1 - IoU distance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

STRIDES = (8, 16, 32)
MAX_ITERATIONS = 300


class WhBox(NamedTuple):
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h


def _as_wh_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if arr.size and not np.all(arr > 0):
        raise ValueError("box dimensions must be strictly positive")
    return arr


def iou_wh(a: WhBox | Sequence[float], b: WhBox | Sequence[float]) -> float:
    """IoU of two boxes sharing a common center."""
    (aw, ah), (bw, bh) = a, b
    if min(aw, ah, bw, bh) <= 0:
        raise ValueError("box dimensions must be strictly positive")
    inter = min(aw, bw) * min(ah, bh)
    return inter / (aw * ah + bw * bh - inter)


def iou_wh_matrix(boxes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    inter = np.minimum(boxes[:, None, 0], centers[None, :, 0]) * np.minimum(boxes[:, None, 1], centers[None, :, 1])
    area_b = boxes[:, 0] * boxes[:, 1]
    area_c = centers[:, 0] * centers[:, 1]
    return inter / (area_b[:, None] + area_c[None, :] - inter)


def kmeanspp_init(boxes, k: int, seed: int | np.random.Generator) -> np.ndarray:
    """Pick ``k`` initial centers, each with probability proportional to D(x)^2.

    D(x) is the 1 - IoU distance to the nearest chosen center. When every
    remaining D(x) is zero the next center is drawn uniformly from the boxes
    not chosen yet.
    """
    boxes = _as_wh_array(boxes)
    n = len(boxes)
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} centers from {n} boxes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    dist = 1.0 - iou_wh_matrix(boxes, boxes[chosen])[:, 0]
    while len(chosen) < k:
        weights = dist ** 2
        total = weights.sum()
        if total > 0:
            idx = int(rng.choice(n, p=weights / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(remaining[rng.integers(len(remaining))])
        chosen.append(idx)
        dist = np.minimum(dist, 1.0 - iou_wh_matrix(boxes, boxes[[idx]])[:, 0])
    return boxes[chosen].copy()


@dataclass
class ClusterResult:
    centers: np.ndarray  # (k, 2)
    mean_iou: float
    iterations: int
    # mean 1 - IoU to the assigned center after each assignment step
    distance_history: list[float] = field(default_factory=list)


def _cluster_cost(members: np.ndarray, center: np.ndarray) -> float:
    return float(np.sum(1.0 - iou_wh_matrix(members, center[None])[:, 0]))


def kmeans_cluster(boxes, k: int, seed: int | np.random.Generator = 0,
                   max_iter: int = MAX_ITERATIONS) -> ClusterResult:
    """Lloyd iterations under 1 - IoU, seeded by K-means++.

    Centers move to the per-dimension median of their members; a median that
    would raise its cluster's total distance is rejected, which keeps the
    mean assignment distance non-increasing. Empty clusters are reseeded to
    the box currently farthest from its center.
    """
    boxes = _as_wh_array(boxes)
    n = len(boxes)
    if not 1 <= k <= n:
        raise ValueError(f"cannot form {k} clusters from {n} boxes")
    centers = kmeanspp_init(boxes, k, seed)
    history: list[float] = []
    assign = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = 1.0 - iou_wh_matrix(boxes, centers)
        new_assign = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new_assign].mean()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = boxes[assign == j]
            if len(members) == 0:
                best = dist[np.arange(n), assign]
                centers[j] = boxes[int(best.argmax())]
                continue
            candidate = np.median(members, axis=0)
            if _cluster_cost(members, candidate) <= _cluster_cost(members, centers[j]):
                centers[j] = candidate
    best_iou = iou_wh_matrix(boxes, centers).max(axis=1)
    return ClusterResult(centers, float(best_iou.mean()), iterations, history)


@dataclass(frozen=True)
class AnchorSet:
    """Nine anchors sorted by area; consecutive triples belong to strides 8, 16, 32."""

    anchors: tuple[WhBox, ...]

    def __post_init__(self):
        if len(self.anchors) != 9:
            raise ValueError(f"an anchor set needs exactly 9 boxes, got {len(self.anchors)}")

    @property
    def groups(self) -> dict[int, tuple[WhBox, ...]]:
        return {s: self.anchors[3 * i:3 * i + 3] for i, s in enumerate(STRIDES)}

    def for_stride(self, stride: int) -> tuple[WhBox, ...]:
        try:
            return self.groups[stride]
        except KeyError:
            raise ValueError(f"no anchors for stride {stride}") from None

    def to_list(self) -> list[list[float]]:
        return [[float(a.w), float(a.h)] for a in self.anchors]


def assign_anchors(centers) -> AnchorSet:
    """Sort nine centers by area (index breaks ties) and group them per stride."""
    arr = _as_wh_array(centers)
    if len(arr) != 9:
        raise ValueError(f"expected 9 anchor centers, got {len(arr)}")
    order = np.argsort(arr[:, 0] * arr[:, 1], kind="stable")
    return AnchorSet(tuple(WhBox(float(w), float(h)) for w, h in arr[order]))


# Anchors clustered on URPC at 640 px, stride-8 triple first.
URPC_ANCHORS = assign_anchors([(28, 25), (39, 37), (55, 46), (68, 65), (96, 84), (139, 112),
                               (182, 160), (272, 219), (436, 362)])


def anchor_table(anchors: AnchorSet, input_size: int = 640) -> list[dict]:
    rows = []
    for stride, triple in anchors.groups.items():
        g = input_size // stride
        rows.append({"stride": stride, "grid": f"{g}x{g}",
                     "anchors": [[int(round(a.w)), int(round(a.h))] for a in triple]})
    return rows


def format_anchor_table(anchors: AnchorSet, input_size: int = 640) -> str:
    lines = []
    for row in anchor_table(anchors, input_size):
        g = input_size // row["stride"]
        pairs = "\t".join(f"{w},{h}" for w, h in row["anchors"])
        lines.append(f"{g} × {g}(px)\t{pairs}")
    return "\n".join(lines)
