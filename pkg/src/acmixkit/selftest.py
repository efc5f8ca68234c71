"""Quick oracle suite behind the ``selftest`` command."""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .acmix import AttentionParams, conv_as_shift_sum, local_attention_weights
from .blocks import RepBranchParams, rep_forward_train, rep_reparameterize
from .boxes import BBox, Detection, GroundTruth, iou_xyxy
from .metrics import class_aps
from .oracles import ap_threshold_enumeration, conv2d_loops, iou_pixel_count
from .tensor import DTYPE, BatchNormParams, ConvKernel, conv2d_direct


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def random_bn(rng: np.random.Generator, c: int) -> BatchNormParams:
    return BatchNormParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                           rng.uniform(0.5, 1.5, c), 1e-3)


def random_rep(rng: np.random.Generator, c_in: int, c_out: int, identity: bool) -> RepBranchParams:
    return RepBranchParams(ConvKernel(rng.normal(0, 0.3, (c_out, c_in, 3, 3))), random_bn(rng, c_out),
                           ConvKernel(rng.normal(0, 0.3, (c_out, c_in, 1, 1))), random_bn(rng, c_out),
                           random_bn(rng, c_out) if identity else None)


def check_conv_decomposition(seeds: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        c_in, c_out = rng.integers(1, 9, size=2)
        h, w = rng.integers(1, 17, size=2)
        k = int(rng.choice([1, 3]))
        x = rng.standard_normal((1, c_in, h, w)).astype(DTYPE)
        kernel = ConvKernel(rng.standard_normal((c_out, c_in, k, k)))
        worst = max(worst, float(np.abs(conv_as_shift_sum(x, kernel) - conv2d_direct(x, kernel)).max()),
                    float(np.abs(conv2d_direct(x, kernel) - conv2d_loops(x, kernel.weights)).max()))
    return CheckResult("conv_decomposition", worst <= 1e-5, f"max_abs={worst:.3e}")


def check_attention_normalization(seeds: int = 10) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        heads = int(rng.integers(1, 4))
        c = heads * int(rng.integers(1, 4))
        q, k = rng.standard_normal((2, 1, c, 6, 7)).astype(DTYPE)
        wts = local_attention_weights(q, k, AttentionParams(heads, 3))
        worst = max(worst, float(np.abs(wts.sum(axis=2) - 1).max()))
    return CheckResult("attention_normalization", worst <= 1e-6, f"max_abs={worst:.3e}")


def check_reparameterization(seeds: int = 10) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 6))
        p = random_rep(rng, c, c, identity=True)
        x = rng.standard_normal((1, c, 8, 8)).astype(DTYPE)
        worst = max(worst, float(np.abs(conv2d_direct(x, rep_reparameterize(p)) - rep_forward_train(x, p)).max()))
    return CheckResult("reparameterization", worst <= 1e-4, f"max_abs={worst:.3e}")


def random_ap_instance(rng: np.random.Generator) -> tuple[list[Detection], list[GroundTruth]]:
    n_gt = int(rng.integers(1, 11))
    n_det = int(rng.integers(0, 21))

    def box():
        x, y = rng.integers(0, 20, size=2)
        w, h = rng.integers(1, 8, size=2)
        return BBox(float(x), float(y), float(x + w), float(y + h))

    gts = [GroundTruth(box(), 0, int(rng.integers(0, 2))) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.6:
            g = gts[int(rng.integers(len(gts)))]
            dx, dy = rng.integers(-1, 2, size=2)
            b = BBox(g.bbox.x1 + dx, g.bbox.y1 + dy, g.bbox.x2 + dx, g.bbox.y2 + dy)
            img = g.image_id
        else:
            b, img = box(), int(rng.integers(0, 2))
        # coarse confidences so ties occur
        dets.append(Detection(b, 0, float(rng.integers(1, 11)) / 10, img))
    return dets, gts


def check_ap_oracle(instances: int = 100) -> CheckResult:
    worst = 0.0
    for seed in range(instances):
        dets, gts = random_ap_instance(np.random.default_rng(seed))
        fast = class_aps(dets, gts, 0.5)[0][0]
        slow = ap_threshold_enumeration(dets, gts, 0.5)
        worst = max(worst, abs(fast - slow))
    return CheckResult("ap_oracle", worst <= 1e-9, f"max_abs={worst:.3e}")


def check_iou(cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(0)
    worst = abs(iou_xyxy(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) - 1 / 7)
    for _ in range(cases):
        a = rng.integers(0, 10, size=2)
        b = rng.integers(0, 10, size=2)
        ba = BBox(*map(float, (*a, *(a + rng.integers(1, 6, size=2)))))
        bb = BBox(*map(float, (*b, *(b + rng.integers(1, 6, size=2)))))
        worst = max(worst, abs(iou_xyxy(ba, bb) - iou_pixel_count(ba, bb)))
    return CheckResult("iou_pixel_count", worst <= 1e-6, f"max_abs={worst:.3e}")


CHECKS: list[Callable[[], CheckResult]] = [
    check_conv_decomposition, check_attention_normalization, check_reparameterization,
    check_ap_oracle, check_iou,
]


def run_selftest() -> list[CheckResult]:
    return [check() for check in CHECKS]
