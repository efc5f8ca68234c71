"""Detector graph (YOLOv7 layout with ACmix and GAM blocks) at configurable width, box decoding and NMS."""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .anchors import STRIDES, URPC_ANCHORS, AnchorSet, WhBox
from .blocks import CBS, MP, AcEElan, ElanH, Gam, RepConv, ResNetAcmix, Sppcspc, _kernel_state
from .boxes import BBox, Detection, iou_matrix
from .tensor import (ConvKernel, as_tensor, assign_state, concat_channels, conv2d_direct,
                     load_archive, save_archive, sigmoid, upsample_nearest)

DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_IOU_THRESHOLD = 0.45
MAX_NMS_CANDIDATES = 3000
MAX_DETECTIONS = 300

# Channel widths at width_multiple = 1.0.
BASE_WIDTHS = {
    "stem": (8, 16, 16, 32),
    "stages": (64, 128, 256, 256),
    "spp": 128,
    "head": (64, 32, 64, 128),  # h4, out3, out4, out5
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    input_size: int = 640
    width_multiple: float = 0.25
    anchors: AnchorSet = URPC_ANCHORS
    seed: int = 0
    heads: int = 4
    gam_reduction: int = 4
    spp_pools: tuple[int, ...] = (5, 9, 13)

    strides = STRIDES

    def __post_init__(self):
        if self.num_classes < 1:
            raise ModelError("num_classes must be >= 1")
        if self.input_size < 32 or self.input_size % 32:
            raise ModelError(f"input_size {self.input_size} must be a positive multiple of 32")
        if not self.width_multiple > 0:
            raise ModelError("width_multiple must be positive")
        if not self.spp_pools or any(k < 1 or k % 2 == 0 for k in self.spp_pools):
            raise ModelError(f"spp_pools {self.spp_pools} must be odd and positive")
        if max(self.spp_pools) > self.input_size // 32:
            raise ModelError(f"largest spp pool {max(self.spp_pools)} exceeds the "
                             f"{self.input_size // 32}x{self.input_size // 32} stride-32 map")

    def width(self, base: int) -> int:
        return max(1, int(round(base * self.width_multiple)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchors"] = self.anchors.to_list()
        d["spp_pools"] = list(self.spp_pools)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["anchors"] = AnchorSet(tuple(WhBox(*a) for a in d["anchors"]))
        d["spp_pools"] = tuple(d["spp_pools"])
        return cls(**d)


class HeadOutput(NamedTuple):
    stride: int
    grid: tuple[int, int]
    raw: np.ndarray  # (N, 3 * (5 + num_classes), H / stride, W / stride)


class Model:
    """The assembled network. Layers live in ``self.layers`` keyed by dotted name."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = cfg.width
        s0, s1, s2, s3 = (w(c) for c in BASE_WIDTHS["stem"])
        e1, e2, e3, e4 = (w(c) for c in BASE_WIDTHS["stages"])
        spp = w(BASE_WIDTHS["spp"])
        h4, o3, o4, o5 = (w(c) for c in BASE_WIDTHS["head"])
        no = 3 * (5 + cfg.num_classes)
        heads = cfg.heads
        try:
            L = {}
            # backbone
            L["backbone.stem0"] = CBS(rng, 3, s0, 3, 1)
            L["backbone.stem1"] = CBS(rng, s0, s1, 3, 2)
            L["backbone.stem2"] = CBS(rng, s1, s2, 3, 1)
            L["backbone.stem3"] = CBS(rng, s2, s3, 3, 2)
            L["backbone.resnet_acmix0"] = ResNetAcmix(rng, s3, heads=heads)
            L["backbone.elan1"] = AcEElan(rng, s3, e1, heads)
            L["backbone.mp1"] = MP(rng, e1, "mp1")
            L["backbone.elan2"] = AcEElan(rng, e1, e2, heads)
            L["backbone.mp2"] = MP(rng, e2, "mp1")
            L["backbone.elan3"] = AcEElan(rng, e2, e3, heads)
            L["backbone.mp3"] = MP(rng, e3, "mp1")
            L["backbone.elan4"] = AcEElan(rng, e3, e4, heads)
            L["backbone.resnet_acmix1"] = ResNetAcmix(rng, e4, heads=heads)
            L["backbone.gam"] = Gam(rng, e4, cfg.gam_reduction)
            # head
            L["head.sppcspc"] = Sppcspc(rng, e4, spp, cfg.spp_pools)
            L["head.lat5"] = CBS(rng, spp, h4, 1)
            L["head.route4"] = CBS(rng, e3, h4, 1)
            L["head.elan_up4"] = ElanH(rng, 2 * h4, h4)
            L["head.lat4"] = CBS(rng, h4, o3, 1)
            L["head.route3"] = CBS(rng, e2, o3, 1)
            L["head.elan_out3"] = ElanH(rng, 2 * o3, o3)
            L["head.down3"] = MP(rng, o3, "mp2")
            L["head.elan_out4"] = ElanH(rng, 2 * o3 + h4, o4)
            L["head.down4"] = MP(rng, o4, "mp2")
            L["head.elan_out5"] = ElanH(rng, 2 * o4 + spp, o5)
            for i, c in enumerate((o3, o4, o5)):
                L[f"head.gam{i}"] = Gam(rng, c, cfg.gam_reduction)
            for i, c in enumerate((o3, o4, o5)):
                L[f"predict.rep{i}"] = RepConv(rng, c, 2 * c)
            self.detect = [ConvKernel.uniform(rng, no, 2 * c, 1, bias=True) for c in (o3, o4, o5)]
        except ValueError as exc:
            raise ModelError(f"invalid width/head combination (width_multiple={cfg.width_multiple}, "
                             f"heads={heads}): {exc}") from exc
        self.layers = L

    def census(self) -> Counter:
        return Counter(layer.kind for layer in self.layers.values())

    def layers_of(self, kind: str) -> list[str]:
        return [name for name, layer in self.layers.items() if layer.kind == kind]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            out.update(layer.state(name))
        for i, k in enumerate(self.detect):
            out.update(_kernel_state(f"predict.detect{i}", k))
        return out

    def fuse(self) -> None:
        """Collapse every Rep block to its single 3x3 kernel."""
        for name in self.layers_of("rep"):
            self.layers[name].fuse()

    def _forward_one(self, x: np.ndarray) -> list[np.ndarray]:
        L = self.layers
        for name in ("stem0", "stem1", "stem2", "stem3", "resnet_acmix0", "elan1", "mp1", "elan2"):
            x = L[f"backbone.{name}"](x)
        p3 = x
        p4 = L["backbone.elan3"](L["backbone.mp2"](p3))
        x = L["backbone.elan4"](L["backbone.mp3"](p4))
        x = L["backbone.gam"](L["backbone.resnet_acmix1"](x))

        spp = L["head.sppcspc"](x)
        up4 = upsample_nearest(L["head.lat5"](spp), 2)
        h4 = L["head.elan_up4"](concat_channels([up4, L["head.route4"](p4)]))
        up3 = upsample_nearest(L["head.lat4"](h4), 2)
        out3 = L["head.elan_out3"](concat_channels([up3, L["head.route3"](p3)]))
        out4 = L["head.elan_out4"](concat_channels([L["head.down3"](out3), h4]))
        out5 = L["head.elan_out5"](concat_channels([L["head.down4"](out4), spp]))

        raws = []
        for i, feat in enumerate((out3, out4, out5)):
            feat = L[f"predict.rep{i}"](L[f"head.gam{i}"](feat))
            raws.append(conv2d_direct(feat, self.detect[i]))
        return raws

    def forward(self, images: np.ndarray) -> list[HeadOutput]:
        s = self.cfg.input_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ModelError(f"expected images of shape (N, 3, {s}, {s}), got {images.shape}")
        images = as_tensor(images)
        # One item at a time keeps per-image results independent of batch composition.
        per_item = [self._forward_one(images[i:i + 1]) for i in range(images.shape[0])]
        outs = []
        for level, stride in enumerate(self.cfg.strides):
            raw = np.concatenate([item[level] for item in per_item], axis=0)
            if not np.all(np.isfinite(raw)):
                raise ModelError(f"non-finite values in stride-{stride} head output")
            outs.append(HeadOutput(stride, raw.shape[2:], raw))
        return outs

    __call__ = forward


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward(model: Model, images: np.ndarray) -> list[HeadOutput]:
    return model.forward(images)


def decode_boxes(heads: list[HeadOutput], anchors: AnchorSet, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                 image_size: tuple[int, int] | None = None) -> list[Detection]:
    """Turn raw head maps into boxes in network-input pixels.

    Box centers are (2*sigmoid(t) - 0.5 + cell) * stride, sizes
    (2*sigmoid(t))**2 * anchor. Boxes are clipped to the image and kept when
    sigmoid(obj) * max sigmoid(cls) >= ``conf_threshold``.
    """
    dets = []
    for head in heads:
        n, ch, gh, gw = head.raw.shape
        if ch % 3 or ch // 3 < 6:
            raise ValueError(f"head channel count {ch} is not 3 * (5 + classes)")
        triple = anchors.for_stride(head.stride)
        img_w, img_h = image_size or (gw * head.stride, gh * head.stride)
        t = sigmoid(head.raw.astype(np.float64)).reshape(n, 3, ch // 3, gh, gw)
        gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        aw = np.array([a.w for a in triple])[None, :, None, None]
        ah = np.array([a.h for a in triple])[None, :, None, None]
        cx = (2 * t[:, :, 0] - 0.5 + gx) * head.stride
        cy = (2 * t[:, :, 1] - 0.5 + gy) * head.stride
        bw = (2 * t[:, :, 2]) ** 2 * aw
        bh = (2 * t[:, :, 3]) ** 2 * ah
        cls_scores = t[:, :, 5:]
        cls_id = cls_scores.argmax(axis=2)
        conf = t[:, :, 4] * cls_scores.max(axis=2)
        x1 = np.clip(cx - bw / 2, 0, img_w)
        y1 = np.clip(cy - bh / 2, 0, img_h)
        x2 = np.clip(cx + bw / 2, 0, img_w)
        y2 = np.clip(cy + bh / 2, 0, img_h)
        keep = (conf >= conf_threshold) & (x2 > x1) & (y2 > y1)
        for b, a, i, j in zip(*np.nonzero(keep)):
            dets.append(Detection(BBox(float(x1[b, a, i, j]), float(y1[b, a, i, j]),
                                       float(x2[b, a, i, j]), float(y2[b, a, i, j])),
                                  int(cls_id[b, a, i, j]), float(conf[b, a, i, j]), int(b)))
    return dets


def nms(dets: list[Detection], iou_threshold: float = DEFAULT_IOU_THRESHOLD,
        max_det: int | None = None) -> list[Detection]:
    """Greedy per-image, per-class suppression.

    Candidates are visited by confidence (descending), ties by input index;
    a candidate is dropped when its IoU with an already kept box of the same
    class and image exceeds ``iou_threshold``. Output keeps that visiting order.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    boxes = np.array([dets[i].bbox for i in order], dtype=np.float64)
    keys = [(dets[i].image_id, dets[i].class_id) for i in order]
    kept: list[int] = []
    kept_by_key: dict[tuple[int, int], list[int]] = {}
    for pos, key in enumerate(keys):
        prior = kept_by_key.setdefault(key, [])
        if prior and iou_matrix(boxes[pos], boxes[prior]).max() > iou_threshold:
            continue
        prior.append(pos)
        kept.append(pos)
        if max_det is not None and len(kept) >= max_det:
            break
    return [dets[order[p]] for p in kept]


def detect(model: Model, images: np.ndarray, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
           iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[Detection]:
    dets = decode_boxes(model.forward(images), model.cfg.anchors, conf_threshold)
    dets.sort(key=lambda d: -d.confidence)
    return nms(dets[:MAX_NMS_CANDIDATES], iou_threshold, MAX_DETECTIONS)


def save_weights(model: Model, path: str | Path) -> None:
    save_archive(path, model.state(), {"config": model.cfg.to_dict()})


def load_weights(path: str | Path) -> Model:
    tensors, meta = load_archive(path)
    if "config" not in meta:
        raise ModelError(f"{path}: archive carries no model config")
    model = build_model(ModelConfig.from_dict(meta["config"]))
    assign_state(model.state(), tensors)
    return model
