"""Composite building blocks: CBS, MP, Sppcspc, Rep, AC-E-ELAN, ELAN-H,
ResNet-ACmix and a GAM wrapper.

Every block is callable on an NCHW tensor and exposes ``state(prefix)``, a
flat name -> array mapping of its live parameters used for weight archives.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .acmix import AcmixParams, acmix_forward
from .gam import GamParams, gam_forward
from .tensor import (DTYPE, BatchNormParams, ConvKernel, batchnorm_infer, concat_channels,
                     conv2d_direct, linear_pointwise, maxpool2d, silu)


def _kernel_state(prefix: str, k: ConvKernel) -> dict[str, np.ndarray]:
    out = {f"{prefix}.weight": k.weights}
    if k.bias is not None:
        out[f"{prefix}.bias"] = k.bias
    return out


def _bn_state(prefix: str, bn: BatchNormParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.gamma": bn.gamma, f"{prefix}.beta": bn.beta,
            f"{prefix}.running_mean": bn.running_mean, f"{prefix}.running_var": bn.running_var}


def _acmix_state(prefix: str, p: AcmixParams) -> dict[str, np.ndarray]:
    if not isinstance(p.alpha, np.ndarray):
        # Scalars are stored as 1-element arrays so they round-trip through archives.
        p.alpha = np.array([p.alpha], dtype=DTYPE)
        p.beta = np.array([p.beta], dtype=DTYPE)
    return {f"{prefix}.proj_q": p.proj_q, f"{prefix}.proj_k": p.proj_k,
            f"{prefix}.proj_v": p.proj_v, f"{prefix}.conv_fc": p.conv_fc,
            f"{prefix}.alpha": p.alpha, f"{prefix}.beta": p.beta}


def _gam_state(prefix: str, p: GamParams) -> dict[str, np.ndarray]:
    out = {f"{prefix}.mlp_w1": p.mlp_w1, f"{prefix}.mlp_w2": p.mlp_w2}
    out.update(_kernel_state(f"{prefix}.spatial_conv1", p.spatial_conv1))
    out.update(_bn_state(f"{prefix}.spatial_bn", p.spatial_bn))
    out.update(_kernel_state(f"{prefix}.spatial_conv2", p.spatial_conv2))
    return out


def cbs_forward(x: np.ndarray, kernel: ConvKernel, bn: BatchNormParams, stride: int = 1) -> np.ndarray:
    return silu(batchnorm_infer(conv2d_direct(x, kernel, stride), bn))


class CBS:
    kind = "cbs"

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 1, stride: int = 1):
        self.kernel = ConvKernel.uniform(rng, c_out, c_in, k)
        self.bn = BatchNormParams.neutral(c_out)
        self.stride = stride
        self.in_channels, self.out_channels = c_in, c_out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return cbs_forward(x, self.kernel, self.bn, self.stride)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {**_kernel_state(f"{prefix}.conv", self.kernel), **_bn_state(f"{prefix}.bn", self.bn)}


class MP:
    """Downsampling block: maxpool branch and strided-conv branch, concatenated.

    ``mp1`` keeps the channel count, ``mp2`` doubles it.
    """

    kind = "mp"

    def __init__(self, rng: np.random.Generator, c_in: int, policy: str = "mp1"):
        if policy not in ("mp1", "mp2"):
            raise ValueError(f"unknown MP policy {policy!r}")
        c_out = c_in if policy == "mp1" else 2 * c_in
        if c_out % 2:
            raise ValueError("MP output channels must be even")
        half = c_out // 2
        self.policy = policy
        self.in_channels, self.out_channels = c_in, c_out
        self.upper = CBS(rng, c_in, half, 1)
        self.lower_reduce = CBS(rng, c_in, half, 1)
        self.lower_down = CBS(rng, half, half, 3, stride=2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"MP needs even spatial dims, got {h}x{w}")
        top = self.upper(maxpool2d(x, 2, 2))
        bottom = self.lower_down(self.lower_reduce(x))
        return concat_channels([top, bottom])

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {**self.upper.state(f"{prefix}.upper"),
                **self.lower_reduce.state(f"{prefix}.lower_reduce"),
                **self.lower_down.state(f"{prefix}.lower_down")}


def mp_forward(x: np.ndarray, block: MP) -> np.ndarray:
    return block(x)


class Sppcspc:
    kind = "sppcspc"

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 pools: Sequence[int] = (5, 9, 13), hidden: int | None = None):
        hidden = hidden or c_out
        if any(k % 2 != 1 for k in pools):
            raise ValueError("pool sizes must be odd")
        self.pools = tuple(pools)
        self.in_channels, self.out_channels, self.hidden = c_in, c_out, hidden
        self.cv1 = CBS(rng, c_in, hidden, 1)
        self.cv2 = CBS(rng, c_in, hidden, 1)
        self.cv3 = CBS(rng, hidden, hidden, 3)
        self.cv4 = CBS(rng, hidden, hidden, 1)
        self.cv5 = CBS(rng, (len(self.pools) + 1) * hidden, hidden, 1)
        self.cv6 = CBS(rng, hidden, hidden, 3)
        self.cv7 = CBS(rng, 2 * hidden, c_out, 1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h, w = x.shape[-2:]
        if min(h, w) < max(self.pools):
            raise ValueError(f"input {h}x{w} smaller than pool window {max(self.pools)}")
        x1 = self.cv4(self.cv3(self.cv1(x)))
        pooled = [x1] + [maxpool2d(x1, k, 1, k // 2) for k in self.pools]
        y1 = self.cv6(self.cv5(concat_channels(pooled)))
        y2 = self.cv2(x)
        return self.cv7(concat_channels([y1, y2]))

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i in range(1, 8):
            out.update(getattr(self, f"cv{i}").state(f"{prefix}.cv{i}"))
        return out


def sppcspc_forward(x: np.ndarray, block: Sppcspc) -> np.ndarray:
    return block(x)


# --- Rep -------------------------------------------------------------------

@dataclass
class RepBranchParams:
    conv3: ConvKernel
    bn3: BatchNormParams
    conv1: ConvKernel
    bn1: BatchNormParams
    identity_bn: BatchNormParams | None = None
    stride: int = 1

    def __post_init__(self):
        if self.conv3.k != 3 or self.conv1.k != 1:
            raise ValueError("Rep branches need a 3x3 and a 1x1 kernel")
        c_out, c_in = self.conv3.out_channels, self.conv3.in_channels
        if (self.conv1.out_channels, self.conv1.in_channels) != (c_out, c_in):
            raise ValueError("Rep branch channel counts differ")
        if self.bn3.channels != c_out or self.bn1.channels != c_out:
            raise ValueError("Rep batch-norm widths differ from output channels")
        if self.identity_bn is not None:
            if c_in != c_out or self.stride != 1:
                raise ValueError("identity branch requires C_in == C_out and stride 1")
            if self.identity_bn.channels != c_out:
                raise ValueError("identity batch-norm width differs from channels")

    @property
    def in_channels(self) -> int:
        return self.conv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels


def rep_forward_train(x: np.ndarray, p: RepBranchParams) -> np.ndarray:
    """Sum of the 3x3+BN, 1x1+BN and (optional) BN-identity branches."""
    out = batchnorm_infer(conv2d_direct(x, p.conv3, p.stride, 1), p.bn3)
    out = out + batchnorm_infer(conv2d_direct(x, p.conv1, p.stride, 0), p.bn1)
    if p.identity_bn is not None:
        out = out + batchnorm_infer(x, p.identity_bn)
    return out


def _fold(weights: np.ndarray, bias: np.ndarray | None, bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    if np.any(bn.running_var <= 0):
        raise ValueError("cannot fold batch norm with non-positive running variance")
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    scale = bn.gamma.astype(np.float64) / std
    b = np.zeros(weights.shape[0]) if bias is None else bias.astype(np.float64)
    return (weights.astype(np.float64) * scale[:, None, None, None],
            bn.beta.astype(np.float64) + (b - bn.running_mean.astype(np.float64)) * scale)


def rep_reparameterize(p: RepBranchParams) -> ConvKernel:
    """Fold all branches into a single 3x3 kernel with bias."""
    k3, b3 = _fold(p.conv3.weights, p.conv3.bias, p.bn3)
    padded = np.zeros(p.conv3.weights.shape)
    padded[:, :, 1, 1] = p.conv1.weights[:, :, 0, 0]
    k1, b1 = _fold(padded, p.conv1.bias, p.bn1)
    kernel, bias = k3 + k1, b3 + b1
    if p.identity_bn is not None:
        dirac = np.zeros(p.conv3.weights.shape)
        dirac[np.arange(p.out_channels), np.arange(p.out_channels), 1, 1] = 1.0
        kid, bid = _fold(dirac, None, p.identity_bn)
        kernel, bias = kernel + kid, bias + bid
    return ConvKernel(kernel.astype(DTYPE), bias.astype(DTYPE))


class RepConv:
    """Rep block with SiLU output; ``fuse()`` switches to the single-kernel form."""

    kind = "rep"

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1):
        identity = BatchNormParams.neutral(c_out) if (c_in == c_out and stride == 1) else None
        self.params = RepBranchParams(ConvKernel.uniform(rng, c_out, c_in, 3), BatchNormParams.neutral(c_out),
                                      ConvKernel.uniform(rng, c_out, c_in, 1), BatchNormParams.neutral(c_out),
                                      identity, stride)
        self.fused: ConvKernel | None = None
        self.in_channels, self.out_channels = c_in, c_out

    def fuse(self) -> None:
        self.fused = rep_reparameterize(self.params)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.fused is not None:
            return silu(conv2d_direct(x, self.fused, self.params.stride, 1))
        return silu(rep_forward_train(x, self.params))

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        p = self.params
        out = {**_kernel_state(f"{prefix}.conv3", p.conv3), **_bn_state(f"{prefix}.bn3", p.bn3),
               **_kernel_state(f"{prefix}.conv1", p.conv1), **_bn_state(f"{prefix}.bn1", p.bn1)}
        if p.identity_bn is not None:
            out.update(_bn_state(f"{prefix}.identity_bn", p.identity_bn))
        return out


# --- ACmix-based blocks -----------------------------------------------------

class AcmixBlock:
    """ACmix in parallel with a 1x1 conv branch and a BN identity jump, summed then SiLU."""

    kind = "acmix_block"

    def __init__(self, rng: np.random.Generator, channels: int, heads: int = 4):
        self.acmix = AcmixParams.init(rng, channels, heads)
        self.conv1 = ConvKernel.uniform(rng, channels, channels, 1)
        self.bn1 = BatchNormParams.neutral(channels)
        self.jump_bn = BatchNormParams.neutral(channels)
        self.in_channels = self.out_channels = channels

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = acmix_forward(x, self.acmix)
        out = out + batchnorm_infer(linear_pointwise(x, self.conv1.weights[:, :, 0, 0]), self.bn1)
        out = out + batchnorm_infer(x, self.jump_bn)
        return silu(out)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {**_acmix_state(f"{prefix}.acmix", self.acmix), **_kernel_state(f"{prefix}.conv1", self.conv1),
                **_bn_state(f"{prefix}.bn1", self.bn1), **_bn_state(f"{prefix}.jump_bn", self.jump_bn)}


class AcEElan:
    """Two 1x1 CBS splits; one runs through two serial ACmix blocks; four taps fused by 1x1 CBS."""

    kind = "ac_e_elan"
    stages = 2

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, heads: int = 4):
        if c_out % 2:
            raise ValueError(f"AC-E-ELAN output width {c_out} must be even")
        half = c_out // 2
        if half % heads:
            raise ValueError(f"AC-E-ELAN branch width {half} not divisible by {heads} heads")
        self.in_channels, self.out_channels, self.branch_width = c_in, c_out, half
        self.split_a = CBS(rng, c_in, half, 1)
        self.split_b = CBS(rng, c_in, half, 1)
        self.blocks = [AcmixBlock(rng, half, heads) for _ in range(self.stages)]
        self.fuse = CBS(rng, (2 + self.stages) * half, c_out, 1)

    def taps(self, x: np.ndarray) -> list[np.ndarray]:
        a = self.split_a(x)
        b = self.split_b(x)
        taps = [a, b]
        for blk in self.blocks:
            b = blk(b)
            taps.append(b)
        return taps

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fuse(concat_channels(self.taps(x)))

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {**self.split_a.state(f"{prefix}.split_a"), **self.split_b.state(f"{prefix}.split_b"),
               **self.fuse.state(f"{prefix}.fuse")}
        for i, blk in enumerate(self.blocks):
            out.update(blk.state(f"{prefix}.stage{i}"))
        return out


def ac_e_elan_forward(x: np.ndarray, block: AcEElan) -> np.ndarray:
    return block(x)


class ElanH:
    """E-ELAN head variant: two splits, four serial 3x3 CBS, six taps fused by 1x1 CBS."""

    kind = "elan_h"

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        if c_out % 4:
            raise ValueError(f"ELAN-H output width {c_out} must be divisible by 4")
        half, quarter = c_out // 2, c_out // 4
        self.in_channels, self.out_channels = c_in, c_out
        self.split_a = CBS(rng, c_in, half, 1)
        self.split_b = CBS(rng, c_in, half, 1)
        widths = [half, quarter, quarter, quarter, quarter]
        self.chain = [CBS(rng, widths[i], widths[i + 1], 3) for i in range(4)]
        self.fuse = CBS(rng, 2 * half + 4 * quarter, c_out, 1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a = self.split_a(x)
        b = self.split_b(x)
        taps = [a, b]
        for cbs in self.chain:
            b = cbs(b)
            taps.append(b)
        return self.fuse(concat_channels(taps))

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {**self.split_a.state(f"{prefix}.split_a"), **self.split_b.state(f"{prefix}.split_b"),
               **self.fuse.state(f"{prefix}.fuse")}
        for i, cbs in enumerate(self.chain):
            out.update(cbs.state(f"{prefix}.chain{i}"))
        return out


class ResNetAcmix:
    """Bottleneck with ACmix in place of the 3x3 conv: silu(expand(acmix(reduce(x))) + x)."""

    kind = "resnet_acmix"

    def __init__(self, rng: np.random.Generator, channels: int, hidden: int | None = None, heads: int = 4):
        hidden = hidden or channels // 2
        if hidden < 1 or hidden % heads:
            raise ValueError(f"ResNet-ACmix hidden width {hidden} not divisible by {heads} heads")
        self.in_channels = self.out_channels = channels
        self.hidden = hidden
        self.reduce = CBS(rng, channels, hidden, 1)
        self.acmix = AcmixParams.init(rng, hidden, heads)
        self.expand = CBS(rng, hidden, channels, 1)

    def main(self, x: np.ndarray) -> np.ndarray:
        return self.expand(acmix_forward(self.reduce(x), self.acmix))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, block expects {self.in_channels}")
        return silu(self.main(x) + x)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {**self.reduce.state(f"{prefix}.reduce"), **_acmix_state(f"{prefix}.acmix", self.acmix),
                **self.expand.state(f"{prefix}.expand")}


def resnet_acmix_forward(x: np.ndarray, block: ResNetAcmix) -> np.ndarray:
    return block(x)


class Gam:
    kind = "gam"

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 4):
        self.params = GamParams.init(rng, channels, reduction)
        self.in_channels = self.out_channels = channels

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return gam_forward(x, self.params)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return _gam_state(prefix, self.params)
