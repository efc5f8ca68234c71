"""ACmix: shared 1x1 projections feeding a shift-sum convolution path and a
windowed multi-head self-attention path, mixed by two scalars."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ConvKernel, concat_channels, linear_pointwise, shift


@dataclass(frozen=True)
class AttentionParams:
    heads: int = 4
    window: int = 3

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.window < 1 or self.window % 2 != 1:
            raise ValueError(f"attention window must be odd, got {self.window}")

    def head_dim(self, channels: int) -> int:
        if channels % self.heads:
            raise ValueError(f"{channels} channels not divisible by {self.heads} heads")
        return channels // self.heads


@dataclass
class AcmixParams:
    proj_q: np.ndarray  # (C, C)
    proj_k: np.ndarray
    proj_v: np.ndarray
    conv_fc: np.ndarray  # (k*k*C, 3C); row block g = p*k + q feeds offset (p, q)
    attn: AttentionParams
    alpha: float = 1.0
    beta: float = 1.0
    kernel_k: int = 3

    def __post_init__(self):
        for name in ("proj_q", "proj_k", "proj_v", "conv_fc"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=DTYPE))
        c = self.channels
        if self.kernel_k % 2 != 1:
            raise ValueError(f"kernel_k must be odd, got {self.kernel_k}")
        for name in ("proj_q", "proj_k", "proj_v"):
            if getattr(self, name).shape != (c, c):
                raise ValueError(f"{name} must be ({c}, {c}), got {getattr(self, name).shape}")
        if self.conv_fc.shape != (self.kernel_k ** 2 * c, 3 * c):
            raise ValueError(
                f"conv_fc must be ({self.kernel_k ** 2 * c}, {3 * c}), got {self.conv_fc.shape}")
        self.attn.head_dim(c)
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ValueError("alpha and beta must be finite")

    @property
    def channels(self) -> int:
        return self.proj_q.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, heads: int = 4, kernel_k: int = 3,
             alpha: float = 1.0, beta: float = 1.0) -> "AcmixParams":
        def uniform(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)

        c = channels
        return cls(uniform(c, c), uniform(c, c), uniform(c, c),
                   uniform(kernel_k * kernel_k * c, 3 * c),
                   AttentionParams(heads, kernel_k), alpha, beta, kernel_k)


def conv_as_shift_sum(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Stride-1 same-pad convolution as k*k pointwise maps, each shifted then summed."""
    if x.shape[1] != kernel.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.in_channels}")
    k = kernel.k
    half = k // 2
    out = None
    for p in range(k):
        for q in range(k):
            staged = linear_pointwise(x, kernel.weights[:, :, p, q])
            moved = shift(staged, (p - half, q - half))
            out = moved if out is None else out + moved
    if kernel.bias is not None:
        out = out + kernel.bias[None, :, None, None]
    return out


def _window_offsets(window: int) -> list[tuple[int, int]]:
    half = window // 2
    return [(a - half, b - half) for a in range(window) for b in range(window)]


def local_attention_weights(q: np.ndarray, k: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Softmax weights of shape (N, heads, window**2, H, W).

    Window positions falling outside the image get weight exactly 0 and are
    not part of the softmax support.
    """
    n, c, h, w = q.shape
    d = params.head_dim(c)
    qh = q.reshape(n, params.heads, d, h, w)
    kh = k.reshape(n, params.heads, d, h, w)
    offsets = _window_offsets(params.window)
    logits = np.empty((n, params.heads, len(offsets), h, w), dtype=DTYPE)
    valid = np.zeros((len(offsets), h, w), dtype=bool)
    ones = np.ones((h, w), dtype=bool)
    scale = DTYPE(1.0 / np.sqrt(d))
    for o, off in enumerate(offsets):
        logits[:, :, o] = np.sum(qh * shift(kh, off), axis=2) * scale
        valid[o] = shift(ones, off)
    logits = np.where(valid[None, None], logits, -np.inf)
    m = logits.max(axis=2, keepdims=True)
    e = np.exp(logits - m)
    return (e / e.sum(axis=2, keepdims=True)).astype(DTYPE)


def multihead_local_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                              params: AttentionParams) -> np.ndarray:
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, c, h, w = v.shape
    d = params.head_dim(c)
    weights = local_attention_weights(q, k, params)
    vh = v.reshape(n, params.heads, d, h, w)
    out = np.zeros_like(vh)
    for o, off in enumerate(_window_offsets(params.window)):
        out += weights[:, :, o][:, :, None] * shift(vh, off)
    return out.reshape(n, c, h, w)


def project_qkv(x: np.ndarray, p: AcmixParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, ACmix expects {p.channels}")
    return (linear_pointwise(x, p.proj_q), linear_pointwise(x, p.proj_k),
            linear_pointwise(x, p.proj_v))


def acmix_path_outputs(x: np.ndarray, p: AcmixParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(F_att, F_conv)`` computed from one shared set of projections."""
    q, k, v = project_qkv(x, p)
    f_att = multihead_local_attention(q, k, v, p.attn)

    c, kk = p.channels, p.kernel_k
    half = kk // 2
    grouped = linear_pointwise(concat_channels([q, k, v]), p.conv_fc)
    f_conv = np.zeros_like(x, dtype=DTYPE)
    for g in range(kk * kk):
        pi, qi = divmod(g, kk)
        f_conv += shift(grouped[:, g * c:(g + 1) * c], (pi - half, qi - half))
    return f_att, f_conv


def acmix_forward(x: np.ndarray, p: AcmixParams) -> np.ndarray:
    f_att, f_conv = acmix_path_outputs(x, p)
    # alpha/beta may be held as 1-element arrays by archived blocks
    alpha, beta = DTYPE(np.ravel(p.alpha)[0]), DTYPE(np.ravel(p.beta)[0])
    return alpha * f_att + beta * f_conv
