"""Box geometry shared by the detector, the anchor tools and the evaluator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def is_valid(self) -> bool:
        return bool(np.isfinite(self).all()) and self.x2 > self.x1 and self.y2 > self.y1


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float
    image_id: int = 0

    def __post_init__(self):
        if not self.bbox.is_valid():
            raise ValueError(f"degenerate detection box {tuple(self.bbox)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "class_id": self.class_id,
                "bbox": [float(v) for v in self.bbox], "confidence": float(self.confidence)}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(BBox(*map(float, obj["bbox"])), int(obj["class_id"]), float(obj["confidence"]),
                   int(obj["image_id"]))


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    class_id: int
    image_id: int = 0

    def __post_init__(self):
        if not self.bbox.is_valid():
            raise ValueError(f"degenerate ground-truth box {tuple(self.bbox)}")


def iou_xyxy(a: BBox, b: BBox) -> float:
    """Intersection over union of two corner-format boxes."""
    if not (a.is_valid() and b.is_valid()):
        raise ValueError("IoU of a degenerate box is undefined")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)
