"""Inversely-proportional channel scaling and the equalization passes.

A layer's output channels can be multiplied by any positive factors without
changing the network function, provided every consumer's kernel slice that
reads those channels is divided by the same factors and the activation is
positive-homogeneous.  The passes here choose factors that raise each
channel's extremum toward the layer extremum, which shrinks per-channel
quantization noise without moving the per-tensor ranges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import EligibilityError, EquantError, SampleStreamError
from .graph import Graph, JunctionNode, LayerNode
from .quantsim import (
    CalibrationRecord,
    kernel_in_channel_max,
    kernel_out_channel_max,
    quantize_dequantize,
)
from .tensors import RELU6_CLAMP, normalize_depthwise_kernel

log = logging.getLogger(__name__)

DEFAULT_S_MAX = 16.0
DEFAULT_ATTENUATION_FLOOR = 0.7
BIAS_CORRECT_MIN_SAMPLES = 32

ELIGIBLE = "eligible"
SKIP_NON_HOMOGENEOUS = "non-homogeneous activation"
SKIP_JUNCTION = "junction consumer"
SKIP_OUTPUT = "network output"
SKIP_NO_CALIBRATION = "no calibration"


@dataclass
class ScaleVector:
    """Per-output-channel factors applied to one layer."""

    layer_id: str
    factors: np.ndarray
    s_max: float

    def to_json(self) -> dict:
        return {"factors": self.factors.tolist(), "s_max": self.s_max}


@dataclass
class EligibilityReport:
    """Per-layer eligibility outcome; every layer appears exactly once."""

    entries: dict[str, str] = field(default_factory=dict)

    def mark(self, layer_id: str, status: str) -> None:
        self.entries[layer_id] = status

    def eligible_ids(self) -> list[str]:
        return [lid for lid, status in self.entries.items() if status == ELIGIBLE]

    def to_json(self) -> dict:
        return dict(self.entries)


@dataclass
class EqualizeResult:
    graph: Graph
    scales: dict[str, ScaleVector]
    report: EligibilityReport
    calibration: CalibrationRecord
    diagnostics: list[str] = field(default_factory=list)


def _structural_skip_reason(graph: Graph, layer_id: str) -> str | None:
    """Why a layer cannot be factorized, ignoring activation and calibration."""
    succ = graph.successors(layer_id)
    if layer_id in graph.outputs or not succ:
        return SKIP_OUTPUT
    for sid in succ:
        if not isinstance(graph.nodes[sid], LayerNode):
            return SKIP_JUNCTION
    return None


def factorize_pair(
    graph: Graph,
    layer_id: str,
    factors: np.ndarray,
    allow_relu6: bool = False,
) -> Graph:
    """Scale a layer's output channels by ``factors`` and inversely scale
    every consumer's matching kernel slice.  Function-preserving for
    positive-homogeneous activations."""
    node = graph.nodes.get(layer_id)
    if not isinstance(node, LayerNode):
        raise EligibilityError(layer_id, "not a convolution layer")
    reason = _structural_skip_reason(graph, layer_id)
    if reason is not None:
        raise EligibilityError(layer_id, reason)
    if not node.activation.is_homogeneous and not (
        node.activation.kind == "relu6" and allow_relu6
    ):
        raise EligibilityError(layer_id, SKIP_NON_HOMOGENEOUS)

    f = np.asarray(factors, dtype=np.float64)
    if f.shape != (node.out_channels,):
        raise EquantError(
            f"scale vector length {f.shape} != {node.out_channels} output channels "
            f"of layer {layer_id!r}"
        )
    if not np.all(np.isfinite(f)) or np.any(f <= 0.0):
        raise EquantError(f"scale factors for layer {layer_id!r} must be finite and > 0")

    updates: dict[str, LayerNode] = {}
    if node.op == "conv":
        kernel = node.kernel * f[None, None, None, :]
    else:
        kernel = normalize_depthwise_kernel(node.kernel) * f[None, None, :]
    updates[layer_id] = replace(node, kernel=kernel, bias=node.bias * f)

    for sid in graph.successors(layer_id):
        consumer = graph.nodes[sid]
        if consumer.op == "conv":
            ck = consumer.kernel / f[None, None, :, None]
        else:
            ck = normalize_depthwise_kernel(consumer.kernel) / f[None, None, :]
        updates[sid] = replace(consumer, kernel=ck)
    return graph.with_nodes(updates)


def relu6_guard(node: LayerNode, calib: CalibrationRecord) -> np.ndarray:
    """Boolean mask of channels safe to amplify under a relu6 activation:
    only channels whose calibrated maximum sits strictly below the clamp."""
    stats = calib.acts.get(node.id)
    if stats is None:
        raise EligibilityError(node.id, SKIP_NO_CALIBRATION)
    return stats.ch_max < RELU6_CLAMP


def _apply_relu6_guard(
    node: LayerNode, calib: CalibrationRecord, scale: np.ndarray
) -> np.ndarray:
    """Keep the rewrite exact under the clamp: saturated channels are frozen
    (scaling either way would move values across the clamp boundary) and
    amplification is capped so no observed activation is pushed past it."""
    amplifiable = relu6_guard(node, calib)
    ch_max = calib.acts[node.id].ch_max
    scale = scale.copy()
    scale[~amplifiable] = 1.0
    cap_idx = amplifiable & (scale > 1.0) & (ch_max > 0.0)
    scale[cap_idx] = np.minimum(scale[cap_idx], RELU6_CLAMP / ch_max[cap_idx])
    return scale


def _sanitize(
    scale: np.ndarray, layer_id: str, s_max: float, diagnostics: list[str]
) -> np.ndarray:
    """Replace NaN (0/0 channels) with 1 and cap +inf at s_max."""
    out = scale.copy()
    nan_idx = np.isnan(out)
    if nan_idx.any():
        out[nan_idx] = 1.0
        diagnostics.append(
            f"layer {layer_id}: channels {np.flatnonzero(nan_idx).tolist()} are dead "
            f"(zero kernel and activation extrema); left unscaled"
        )
    inf_idx = np.isinf(out)
    if inf_idx.any():
        out[inf_idx] = s_max
        diagnostics.append(
            f"layer {layer_id}: channels {np.flatnonzero(inf_idx).tolist()} have a zero "
            f"extremum; scale clamped to s_max={s_max}"
        )
    zero_idx = out <= 0.0
    if zero_idx.any():
        out[zero_idx] = 1.0
        diagnostics.append(
            f"layer {layer_id}: channels {np.flatnonzero(zero_idx).tolist()} are ignored "
            f"by every consumer; left unscaled"
        )
    return out


def _diagnose_dead(
    ker_ch: np.ndarray, act_ch: np.ndarray, layer_id: str, s_max: float,
    diagnostics: list[str],
) -> None:
    dead = (ker_ch == 0.0) & (act_ch == 0.0)
    if dead.any() and (ker_ch.max() > 0.0 or act_ch.max() > 0.0):
        diagnostics.append(
            f"layer {layer_id}: dead channels {np.flatnonzero(dead).tolist()} "
            f"(zero kernel and activation extrema); scale clamped to s_max={s_max}"
        )


def _eligibility(graph: Graph, layer_id: str, calib: CalibrationRecord) -> str:
    reason = _structural_skip_reason(graph, layer_id)
    if reason is not None:
        return reason
    node = graph.nodes[layer_id]
    if not node.activation.is_homogeneous and node.activation.kind != "relu6":
        return SKIP_NON_HOMOGENEOUS
    if layer_id not in calib.acts:
        return SKIP_NO_CALIBRATION
    return ELIGIBLE


def _apply_and_update(
    graph: Graph, calib: CalibrationRecord, node: LayerNode, scale: np.ndarray
) -> Graph:
    new_graph = factorize_pair(graph, node.id, scale, allow_relu6=True)
    calib.acts[node.id] = calib.acts[node.id].scaled(scale)
    for lid in (node.id, *new_graph.successors(node.id)):
        kernel = new_graph.nodes[lid].kernel
        calib.weight_minmax[lid] = (float(kernel.min()), float(kernel.max()))
    return new_graph


def one_step_equalize(
    graph: Graph, calib: CalibrationRecord, s_max: float = DEFAULT_S_MAX
) -> EqualizeResult:
    """Amplify each channel toward the layer extremum in one pass.

    Per channel the factor is min(kernel-extremum ratio, activation-extremum
    ratio, s_max), so both the per-layer weight maximum and activation maximum
    are preserved and every factor is >= 1.  Calibration statistics are updated
    analytically (exact for homogeneous activations).
    """
    if s_max < 1.0:
        raise EquantError(f"s_max must be >= 1, got {s_max}")
    calib = calib.copy()
    scales: dict[str, ScaleVector] = {}
    report = EligibilityReport()
    diagnostics: list[str] = []

    for lid in list(graph.layer_ids):
        status = _eligibility(graph, lid, calib)
        report.mark(lid, status)
        if status != ELIGIBLE:
            continue
        node = graph.nodes[lid]
        ker_ch = kernel_out_channel_max(node)
        act_ch = calib.acts[lid].ch_abs_max
        _diagnose_dead(ker_ch, act_ch, lid, s_max, diagnostics)
        with np.errstate(divide="ignore", invalid="ignore"):
            ker_scale = ker_ch.max() / ker_ch
            act_scale = act_ch.max() / act_ch
            scale = np.minimum(np.minimum(ker_scale, act_scale), s_max)
        scale = _sanitize(scale, lid, s_max, diagnostics)
        if node.activation.kind == "relu6":
            scale = _apply_relu6_guard(node, calib, scale)
        graph = _apply_and_update(graph, calib, node, scale)
        scales[lid] = ScaleVector(lid, scale, s_max)

    for msg in diagnostics:
        log.warning(msg)
    return EqualizeResult(graph, scales, report, calib, diagnostics)


def _successor_in_channel_max(graph: Graph, layer_id: str) -> np.ndarray:
    """Element-wise max, across all consumers, of per-input-channel kernel
    extrema; with fan-out this is the conservative bound that keeps every
    consumer's weight extremum from growing."""
    acc: np.ndarray | None = None
    for sid in graph.successors(layer_id):
        v = kernel_in_channel_max(graph.nodes[sid])
        acc = v if acc is None else np.maximum(acc, v)
    return acc


def two_step_equalize(
    graph: Graph,
    calib: CalibrationRecord,
    s_max: float = DEFAULT_S_MAX,
    mode: str = "standard",
    attenuation_floor: float = DEFAULT_ATTENUATION_FLOOR,
) -> EqualizeResult:
    """Equalize after first discounting channels the successor already
    attenuates.

    Each ratio is weighted by (successor per-input-channel max / successor
    max), which equalizes the successor's weights without growing its
    extremum.  In standard mode the factors are renormalized by their minimum
    so all end up >= 1; mobilenet mode keeps attenuation (factors < 1) but
    clamps it at ``attenuation_floor`` and never amplifies saturated relu6
    channels.
    """
    if mode not in ("standard", "mobilenet"):
        raise EquantError(f"unknown two-step mode {mode!r}")
    if s_max < 1.0:
        raise EquantError(f"s_max must be >= 1, got {s_max}")
    if not (0.0 < attenuation_floor <= 1.0):
        raise EquantError(f"attenuation floor must be in (0, 1], got {attenuation_floor}")
    calib = calib.copy()
    scales: dict[str, ScaleVector] = {}
    report = EligibilityReport()
    diagnostics: list[str] = []

    for lid in list(graph.layer_ids):
        status = _eligibility(graph, lid, calib)
        report.mark(lid, status)
        if status != ELIGIBLE:
            continue
        node = graph.nodes[lid]
        ker_ch = kernel_out_channel_max(node)
        act_ch = calib.acts[lid].ch_abs_max
        _diagnose_dead(ker_ch, act_ch, lid, s_max, diagnostics)
        suc_ch = _successor_in_channel_max(graph, lid)
        with np.errstate(divide="ignore", invalid="ignore"):
            suc_ratio = suc_ch / suc_ch.max()
            ker_scale = (ker_ch.max() / ker_ch) * suc_ratio
            act_scale = (act_ch.max() / act_ch) * suc_ratio
            scale = np.minimum(np.minimum(ker_scale, act_scale), s_max)
        scale = _sanitize(scale, lid, s_max, diagnostics)
        if mode == "standard":
            scale = scale / scale.min()
        else:
            scale = np.maximum(scale, attenuation_floor)
        if node.activation.kind == "relu6":
            scale = _apply_relu6_guard(node, calib, scale)
        graph = _apply_and_update(graph, calib, node, scale)
        scales[lid] = ScaleVector(lid, scale, s_max)

    for msg in diagnostics:
        log.warning(msg)
    return EqualizeResult(graph, scales, report, calib, diagnostics)


def _batched(samples: Iterable[np.ndarray], limit: int) -> np.ndarray:
    batch = []
    for i, s in enumerate(samples):
        if i >= limit:
            break
        s = np.asarray(s, dtype=np.float64)
        batch.append(s if s.ndim == 4 else s[None, ...])
    if not batch:
        raise SampleStreamError("bias correction sample stream is empty")
    return np.concatenate(batch, axis=0)


def _channel_means(tapped: np.ndarray) -> np.ndarray:
    return tapped.reshape(-1, tapped.shape[-1]).mean(axis=0)


def bias_correct(
    float_graph: Graph,
    quant_graph: Graph,
    samples: Iterable[np.ndarray],
    count: int = 1000,
) -> Graph:
    """Shift quantized-layer biases so per-channel output means match the
    float network's, layer by layer so corrections compound downstream.

    Corrections are computed on dequantized post-activation means and snapped
    to the layer's bias grid when one is present.
    """
    if list(float_graph.nodes) != list(quant_graph.nodes) or [
        type(n).__name__ for n in float_graph.nodes.values()
    ] != [type(n).__name__ for n in quant_graph.nodes.values()]:
        raise EquantError("float and quantized graphs have different structure")

    x = _batched(samples, count)
    if x.shape[0] < count:
        if x.shape[0] < BIAS_CORRECT_MIN_SAMPLES:
            raise SampleStreamError(
                f"bias correction needs at least {BIAS_CORRECT_MIN_SAMPLES} samples, "
                f"got {x.shape[0]}"
            )
        log.warning(
            "bias correction requested %d samples but only %d are available",
            count,
            x.shape[0],
        )

    layer_ids = float_graph.layer_ids
    _, float_taps = float_graph.execute(x, taps=layer_ids)
    float_means = {lid: _channel_means(float_taps[lid]) for lid in layer_ids}

    for lid in layer_ids:
        _, taps = quant_graph.execute(x, taps=[lid])
        delta = float_means[lid] - _channel_means(taps[lid])
        node = quant_graph.nodes[lid]
        new_bias = node.bias + delta
        if node.quant is not None and node.quant.bias is not None:
            new_bias = quantize_dequantize(new_bias, node.quant.bias)
        quant_graph = quant_graph.with_nodes({lid: replace(node, bias=new_bias)})
    return quant_graph
