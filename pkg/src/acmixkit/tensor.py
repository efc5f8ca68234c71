"""Dense NCHW float32 tensors and the numerical primitives built on them.

Tensors are plain ``numpy.ndarray`` objects of rank 4 and dtype float32.
:func:`as_tensor` is the validating constructor for external input.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# Centralized tolerances.
ELEMENTWISE_TOL = 1e-6
COMPOSITE_TOL = 1e-5


class Shape(NamedTuple):
    batch: int
    channels: int
    height: int
    width: int

    @property
    def numel(self) -> int:
        return self.batch * self.channels * self.height * self.width


class KernelOffset(NamedTuple):
    """Displacement along rows (``dx``) and columns (``dy``)."""

    dx: int
    dy: int


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate ``data`` as a rank-4 float32 tensor.

    ``data`` may be a flat sequence when ``shape`` is given. Non-finite
    values and empty dimensions are rejected.
    """
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return np.ascontiguousarray(arr)


def shape_of(x: np.ndarray) -> Shape:
    return Shape(*x.shape)


@dataclass
class ConvKernel:
    """Convolution weights of shape (C_out, C_in, k, k) plus optional bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=DTYPE)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"kernel weights must be (C_out, C_in, k, k), got {self.weights.shape}")
        if self.k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.k}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
            if self.bias.shape[0] != self.out_channels:
                raise ValueError("bias length must equal out_channels")
        if not np.all(np.isfinite(self.weights)) or (
            self.bias is not None and not np.all(np.isfinite(self.bias))
        ):
            raise ValueError("kernel contains NaN or Inf")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int, k: int, bias: bool = False) -> "ConvKernel":
        w = np.zeros((out_channels, in_channels, k, k), dtype=DTYPE)
        return cls(w, np.zeros(out_channels, dtype=DTYPE) if bias else None)

    @classmethod
    def uniform(cls, rng: np.random.Generator, out_channels: int, in_channels: int, k: int,
                bias: bool = False) -> "ConvKernel":
        """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
        bound = 1.0 / np.sqrt(in_channels * k * k)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, k, k)).astype(DTYPE)
        b = rng.uniform(-bound, bound, size=out_channels).astype(DTYPE) if bias else None
        return cls(w, b)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=DTYPE).reshape(-1))
        n = self.gamma.shape[0]
        if any(getattr(self, f).shape[0] != n for f in ("beta", "running_mean", "running_var")):
            raise ValueError("batch-norm parameter lengths differ")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def neutral(cls, channels: int, eps: float = 1e-3) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) so that bn(v) = v * scale + shift."""
        scale = self.gamma / np.sqrt(self.running_var + DTYPE(self.eps))
        return scale.astype(DTYPE), (self.beta - self.running_mean * scale).astype(DTYPE)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_direct(x: np.ndarray, kernel: ConvKernel, stride: int = 1,
                  zero_pad: int | None = None) -> np.ndarray:
    """Cross-correlation with zero padding (``k // 2`` by default), via patch gathering."""
    if x.shape[1] != kernel.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.in_channels}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = kernel.k
    pad = k // 2 if zero_pad is None else zero_pad
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} with pad {pad} does not fit input {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, Ho, Wo, C*k*k) @ (C*k*k, C_out)
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = patches @ kernel.weights.reshape(kernel.out_channels, -1).T
    if kernel.bias is not None:
        out += kernel.bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), dtype=DTYPE)


def shift(x: np.ndarray, off: KernelOffset | tuple[int, int]) -> np.ndarray:
    """``out[..., i, j] = x[..., i + dx, j + dy]`` with zero fill outside the input."""
    dx, dy = off
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    if abs(dx) >= h or abs(dy) >= w:
        return out
    rows_out = slice(max(0, -dx), h - max(0, dx))
    rows_in = slice(max(0, dx), h - max(0, -dx))
    cols_out = slice(max(0, -dy), w - max(0, dy))
    cols_in = slice(max(0, dy), w - max(0, -dy))
    out[..., rows_out, cols_out] = x[..., rows_in, cols_in]
    return out


def softmax_axis(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def maxpool2d(x: np.ndarray, k: int, stride: int, pad: int = 0) -> np.ndarray:
    """Max over k x k windows; padding counts as -inf."""
    h, w = x.shape[-2:]
    if k > h or k > w:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(windows.max(axis=(-2, -1)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


def silu(x: np.ndarray) -> np.ndarray:
    return activation(x, "silu")


def batchnorm_infer(x: np.ndarray, p: BatchNormParams) -> np.ndarray:
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, batch norm has {p.channels}")
    scale, shift_ = p.scale_shift()
    return x * scale[None, :, None, None] + shift_[None, :, None, None]


def linear_pointwise(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel fully connected map (a 1x1 convolution)."""
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ValueError(f"weights {weights.shape} incompatible with {x.shape[1]} input channels")
    out = np.einsum("oc,nchw->nohw", weights, x)
    if bias is not None:
        out = out + np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ValueError("nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {t.shape} with {ref}: batch/spatial mismatch")
    return np.concatenate(xs, axis=1)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    if sum(sizes) != x.shape[1]:
        raise ValueError("split sizes must sum to the channel count")
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x.copy()
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


# --- tensor archive -----------------------------------------------------------
#
# Layout: 8-byte little-endian header length, UTF-8 JSON header, raw f32 payload.
# Header: {"tensors": {name: {"shape", "dtype", "offset"}}, "metadata": {...}}
# Offsets are relative to the payload start.

class ArchiveError(ValueError):
    pass


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    entries, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ArchiveError(f"{path}: truncated archive header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise ArchiveError(f"{path}: truncated archive header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: malformed archive header") from exc
    payload = memoryview(raw)[8 + hlen:]
    out = {}
    for name, meta in header.get("tensors", {}).items():
        if meta.get("dtype") != "f32":
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {meta.get('dtype')!r}")
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, end = meta["offset"], meta["offset"] + 4 * count
        if end > len(payload):
            raise ArchiveError(f"tensor {name!r}: truncated payload")
        out[name] = np.frombuffer(payload[start:end], dtype="<f4").astype(DTYPE).reshape(shape)
    return out, header.get("metadata", {})


def assign_state(state: Mapping[str, np.ndarray], loaded: Mapping[str, np.ndarray]) -> None:
    """Copy ``loaded`` arrays into the live arrays of ``state`` by name.

    Missing names or shape mismatches raise; unknown extra names warn.
    """
    for name, target in state.items():
        if name not in loaded:
            raise ArchiveError(f"missing tensor {name!r}")
        src = loaded[name]
        if src.shape != target.shape:
            raise ArchiveError(f"tensor {name!r}: shape {src.shape} does not match expected {target.shape}")
        if not np.all(np.isfinite(src)):
            raise ArchiveError(f"tensor {name!r}: contains NaN or Inf")
    for name in sorted(set(loaded) - set(state)):
        warnings.warn(f"ignoring unknown tensor {name!r} in archive", stacklevel=2)
    for name, target in state.items():
        np.copyto(target, loaded[name])
