"""Global Attention Mechanism: a channel gate followed by a spatial gate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (DTYPE, BatchNormParams, ConvKernel, activation, batchnorm_infer,
                     conv2d_direct)


@dataclass
class GamParams:
    reduction: int
    mlp_w1: np.ndarray  # (C/r, C)
    mlp_w2: np.ndarray  # (C, C/r)
    spatial_conv1: ConvKernel  # C -> C/r, 7x7
    spatial_bn: BatchNormParams
    spatial_conv2: ConvKernel  # C/r -> C, 7x7
    mlp_b1: np.ndarray | None = None
    mlp_b2: np.ndarray | None = None

    def __post_init__(self):
        self.mlp_w1 = np.ascontiguousarray(self.mlp_w1, dtype=DTYPE)
        self.mlp_w2 = np.ascontiguousarray(self.mlp_w2, dtype=DTYPE)
        c, r = self.channels, self.reduction
        if r < 1 or c % r:
            raise ValueError(f"{c} channels not divisible by reduction {r}")
        mid = c // r
        if self.mlp_w1.shape != (mid, c) or self.mlp_w2.shape != (c, mid):
            raise ValueError("channel MLP shapes inconsistent with channels/reduction")
        if (self.spatial_conv1.in_channels, self.spatial_conv1.out_channels) != (c, mid):
            raise ValueError("spatial_conv1 must map C -> C/r")
        if (self.spatial_conv2.in_channels, self.spatial_conv2.out_channels) != (mid, c):
            raise ValueError("spatial_conv2 must map C/r -> C")
        if self.spatial_conv1.k != 7 or self.spatial_conv2.k != 7:
            raise ValueError("spatial convolutions must be 7x7")
        if self.spatial_bn.channels != mid:
            raise ValueError("spatial_bn must have C/r channels")

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int = 4) -> "GamParams":
        if channels % reduction:
            raise ValueError(f"{channels} channels not divisible by reduction {reduction}")
        mid = channels // reduction
        b1, b2 = 1.0 / np.sqrt(channels), 1.0 / np.sqrt(mid)
        return cls(
            reduction,
            rng.uniform(-b1, b1, size=(mid, channels)).astype(DTYPE),
            rng.uniform(-b2, b2, size=(channels, mid)).astype(DTYPE),
            ConvKernel.uniform(rng, mid, channels, 7, bias=True),
            BatchNormParams.neutral(mid),
            ConvKernel.uniform(rng, channels, mid, 7, bias=True),
        )


def channel_gate(x: np.ndarray, p: GamParams) -> np.ndarray:
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, GAM expects {p.channels}")
    tokens = x.transpose(0, 2, 3, 1)  # channel-last, MLP applied per position
    hidden = tokens @ p.mlp_w1.T
    if p.mlp_b1 is not None:
        hidden = hidden + p.mlp_b1
    hidden = np.maximum(hidden, 0)
    logits = hidden @ p.mlp_w2.T
    if p.mlp_b2 is not None:
        logits = logits + p.mlp_b2
    return activation(np.ascontiguousarray(logits.transpose(0, 3, 1, 2), dtype=DTYPE), "sigmoid")


def spatial_gate(x: np.ndarray, p: GamParams) -> np.ndarray:
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, GAM expects {p.channels}")
    hidden = activation(batchnorm_infer(conv2d_direct(x, p.spatial_conv1), p.spatial_bn), "relu")
    return activation(conv2d_direct(hidden, p.spatial_conv2), "sigmoid")


def channel_attention(x: np.ndarray, p: GamParams) -> np.ndarray:
    return channel_gate(x, p) * x


def spatial_attention(x: np.ndarray, p: GamParams) -> np.ndarray:
    return spatial_gate(x, p) * x


def gam_forward(x: np.ndarray, p: GamParams) -> np.ndarray:
    return spatial_attention(channel_attention(x, p), p)
