"""Dense-tensor primitives for CNN forward passes.

Conventions used throughout the toolkit:

* feature maps are channel-last float64 arrays of shape (batch, height, width, channels)
* convolution kernels are (kh, kw, c_in, c_out)
* depthwise kernels are (kh, kw, c) (a trailing multiplier axis of 1 is accepted)
* biases and per-channel vectors are rank 1

All arithmetic is double precision; float32 is a storage format only.  The
convolutions lower to a fixed im2col + matmul sequence, so repeated runs on
identical inputs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeMismatchError

PAD_MODES = ("valid", "same")

ACTIVATION_KINDS = ("linear", "relu", "prelu", "relu6")

# Kinds satisfying A(a*x) == a*A(x) for all a > 0.  relu6 breaks this as soon
# as amplification pushes values past the clamp.
HOMOGENEOUS_KINDS = frozenset({"linear", "relu", "prelu"})

RELU6_CLAMP = 6.0


@dataclass(frozen=True)
class Activation:
    """Element-wise activation attached to a layer.

    ``slope`` is only meaningful for prelu: either a scalar or one value per
    output channel.  Stored as plain floats so instances stay hashable and
    JSON-friendly.
    """

    kind: str
    slope: float | tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "prelu":
            if self.slope is None:
                raise ValueError("prelu requires a slope")
            slopes = (self.slope,) if isinstance(self.slope, (int, float)) else self.slope
            if any(s < 0 for s in slopes):
                raise ValueError("prelu slopes must be >= 0")
        elif self.slope is not None:
            raise ValueError(f"{self.kind} takes no slope parameter")

    @property
    def is_homogeneous(self) -> bool:
        return self.kind in HOMOGENEOUS_KINDS

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.slope is not None:
            out["slope"] = list(self.slope) if isinstance(self.slope, tuple) else self.slope
        return out

    @staticmethod
    def from_json(obj: dict) -> "Activation":
        slope = obj.get("slope")
        if isinstance(slope, list):
            slope = tuple(float(s) for s in slope)
        return Activation(obj["kind"], slope)


LINEAR = Activation("linear")
RELU = Activation("relu")
RELU6 = Activation("relu6")


def prelu(slope) -> Activation:
    if isinstance(slope, (list, tuple, np.ndarray)):
        return Activation("prelu", tuple(float(s) for s in slope))
    return Activation("prelu", float(slope))


def apply_activation(x: np.ndarray, act: Activation) -> np.ndarray:
    """Apply an activation element-wise; channels live on the last axis."""
    if act.kind == "linear":
        return x
    if act.kind == "relu":
        return np.maximum(x, 0.0)
    if act.kind == "relu6":
        return np.clip(x, 0.0, RELU6_CLAMP)
    # prelu
    slope = act.slope
    if isinstance(slope, tuple):
        s = np.asarray(slope, dtype=np.float64)
        if s.shape[0] != x.shape[-1]:
            raise ShapeMismatchError(
                f"prelu slope count {s.shape[0]} != channel count {x.shape[-1]}"
            )
    else:
        s = float(slope)
    return np.where(x >= 0.0, x, s * x)


class ChannelStats(NamedTuple):
    """Per-channel reductions over batch and spatial axes."""

    min: np.ndarray
    max: np.ndarray
    energy: np.ndarray  # sum of squares


def channel_stats(x: np.ndarray) -> ChannelStats:
    """Per-channel (min, max, sum-of-squares) of a feature map."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeMismatchError("channel_stats: empty tensor")
    flat = x.reshape(-1, x.shape[-1])
    return ChannelStats(flat.min(axis=0), flat.max(axis=0), np.sum(flat * flat, axis=0))


def _check_stride(stride) -> tuple[int, int]:
    sh, sw = int(stride[0]), int(stride[1])
    if sh < 1 or sw < 1:
        raise ShapeMismatchError(f"stride must be positive, got {(sh, sw)}")
    return sh, sw


def _patches(x: np.ndarray, kh: int, kw: int, stride, padding: str) -> np.ndarray:
    """Gather (n, oh, ow, kh, kw, c) sliding windows with zero padding."""
    if padding not in PAD_MODES:
        raise ShapeMismatchError(f"unknown padding mode {padding!r}")
    sh, sw = _check_stride(stride)
    n, h, w, c = x.shape
    if padding == "same":
        oh = -(-h // sh)
        ow = -(-w // sw)
        ph = max((oh - 1) * sh + kh - h, 0)
        pw = max((ow - 1) * sw + kw - w, 0)
        if ph or pw:
            x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        oh = (h - kh) // sh + 1
        ow = (w - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(
                f"kernel {kh}x{kw} does not fit input {h}x{w} with valid padding"
            )
    out = np.empty((n, oh, ow, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, :, i, j, :] = x[:, i : i + sh * (oh - 1) + 1 : sh,
                                      j : j + sw * (ow - 1) + 1 : sw, :]
    return out


def _as_feature_map(x: np.ndarray, who: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatchError(f"{who}: expected rank-4 feature map, got rank {x.ndim}")
    return x


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride=(1, 1),
    padding: str = "valid",
) -> np.ndarray:
    """Cross-correlate a feature map with a (kh, kw, c_in, c_out) kernel."""
    x = _as_feature_map(x, "conv2d input")
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeMismatchError(f"conv2d: kernel must be rank 4, got rank {kernel.ndim}")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeMismatchError(
            f"conv2d: input channels {x.shape[-1]} != kernel c_in {c_in}"
        )
    if bias.ndim != 1 or bias.shape[0] != c_out:
        raise ShapeMismatchError(
            f"conv2d: bias length {bias.shape} != kernel c_out {c_out}"
        )
    cols = _patches(x, kh, kw, stride, padding)
    n, oh, ow = cols.shape[:3]
    out = cols.reshape(n * oh * ow, kh * kw * c_in) @ kernel.reshape(kh * kw * c_in, c_out)
    return out.reshape(n, oh, ow, c_out) + bias


def normalize_depthwise_kernel(kernel: np.ndarray) -> np.ndarray:
    """Accept (kh, kw, c) or (kh, kw, c, 1) and return (kh, kw, c)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 4:
        if kernel.shape[3] != 1:
            raise ShapeMismatchError(
                f"depthwise kernel multiplier must be 1, got {kernel.shape[3]}"
            )
        kernel = kernel[:, :, :, 0]
    if kernel.ndim != 3:
        raise ShapeMismatchError(
            f"depthwise kernel must be rank 3 or 4, got rank {kernel.ndim}"
        )
    return kernel


def depthwise_conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride=(1, 1),
    padding: str = "valid",
) -> np.ndarray:
    """Per-channel convolution: output channel i depends only on input channel i."""
    x = _as_feature_map(x, "depthwise_conv2d input")
    kernel = normalize_depthwise_kernel(kernel)
    bias = np.asarray(bias, dtype=np.float64)
    kh, kw, c = kernel.shape
    if x.shape[-1] != c:
        raise ShapeMismatchError(
            f"depthwise_conv2d: input channels {x.shape[-1]} != kernel channels {c}"
        )
    if bias.ndim != 1 or bias.shape[0] != c:
        raise ShapeMismatchError(
            f"depthwise_conv2d: bias length {bias.shape} != channel count {c}"
        )
    cols = _patches(x, kh, kw, stride, padding)
    out = np.einsum("nhwijc,ijc->nhwc", cols, kernel)
    return out + bias
