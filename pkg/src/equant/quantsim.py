"""Fake quantization: range specs, quantize-dequantize, calibration.

The integer grid spans the spec range inclusively (step = range / 2**bits),
so every in-range value round-trips to within half a step and the map is
exactly idempotent.  Weights use symmetric signed specs, activations affine
unsigned specs with zero always representable, biases a wider symmetric spec
whose step is the product of the input-activation and weight steps.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Iterator

import numpy as np

from .errors import CalibrationError, NumericError, SampleStreamError, ShapeMismatchError
from .tensors import channel_stats, normalize_depthwise_kernel

if TYPE_CHECKING:  # pragma: no cover
    from .graph import Graph

log = logging.getLogger(__name__)

# Reserved producer name for the graph input tensor.
GRAPH_INPUT = "input"

QUANT_MODES = ("weights-only", "activations-only", "full")

DEFAULT_CALIBRATION_COUNT = 64


@dataclass(frozen=True)
class QuantSpec:
    """Per-tensor quantization range: step size is (max - min) / 2**bits."""

    min: float
    max: float
    bits: int = 8
    signed: bool = False

    def __post_init__(self):
        if not (1 <= self.bits <= 32):
            raise ValueError(f"bits must be in [1, 32], got {self.bits}")
        if not (np.isfinite(self.min) and np.isfinite(self.max)):
            raise NumericError(f"non-finite quantization range ({self.min}, {self.max})")
        if self.max < self.min:
            raise ValueError(f"max {self.max} < min {self.min}")
        if self.signed and self.min != -self.max:
            raise ValueError("signed specs must be symmetric (min == -max)")
        if not self.signed and not (self.min <= 0.0 <= self.max):
            raise ValueError("affine specs must bracket zero so it is representable")

    @property
    def degenerate(self) -> bool:
        return self.max == self.min

    @property
    def scale(self) -> float:
        if self.degenerate:
            return 1.0
        return (self.max - self.min) / float(2**self.bits)

    @property
    def zero_point(self) -> int:
        if self.signed or self.degenerate:
            return 0
        return int(round(-self.min / self.scale))

    @staticmethod
    def symmetric(max_abs: float, bits: int = 8) -> "QuantSpec":
        m = abs(float(max_abs))
        return QuantSpec(-m, m, bits, signed=True)

    @staticmethod
    def affine(lo: float, hi: float, bits: int = 8) -> "QuantSpec":
        return QuantSpec(min(float(lo), 0.0), max(float(hi), 0.0), bits, signed=False)

    @staticmethod
    def symmetric_from_scale(scale: float, bits: int) -> "QuantSpec":
        return QuantSpec.symmetric(float(scale) * 2 ** (bits - 1), bits)

    def to_json(self) -> dict:
        return {
            "min": self.min,
            "max": self.max,
            "bits": self.bits,
            "signed": self.signed,
            "scale": self.scale,
            "zero_point": self.zero_point,
        }

    @staticmethod
    def from_json(obj: dict) -> "QuantSpec":
        return QuantSpec(obj["min"], obj["max"], obj["bits"], obj["signed"])


@dataclass(frozen=True)
class LayerQuant:
    """Quantization wrappers attached to a layer; None means pass-through."""

    weight: QuantSpec | None = None
    act: QuantSpec | None = None
    bias: QuantSpec | None = None

    def to_json(self) -> dict:
        return {
            role: spec.to_json()
            for role, spec in (("weight", self.weight), ("act", self.act), ("bias", self.bias))
            if spec is not None
        }

    @staticmethod
    def from_json(obj: dict) -> "LayerQuant":
        return LayerQuant(
            weight=QuantSpec.from_json(obj["weight"]) if "weight" in obj else None,
            act=QuantSpec.from_json(obj["act"]) if "act" in obj else None,
            bias=QuantSpec.from_json(obj["bias"]) if "bias" in obj else None,
        )


def quantize_dequantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Round onto the spec grid and back; |out - clamp(x)| <= scale / 2."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize_dequantize: non-finite input values")
    if spec.degenerate:
        return np.full_like(x, spec.min)
    s = spec.scale
    if spec.signed:
        half = 2 ** (spec.bits - 1)
        q = np.clip(np.round(x / s), -half, half)
        return q * s
    zp = spec.zero_point
    q = np.clip(np.round(x / s) + zp, 0, 2**spec.bits)
    return (q - zp) * s


@dataclass
class TensorStats:
    """Min/max and mean-square statistics of one tensor role, per channel."""

    min: float
    max: float
    ch_min: np.ndarray
    ch_max: np.ndarray
    mean_sq: float
    ch_mean_sq: np.ndarray

    @property
    def abs_max(self) -> float:
        return max(abs(self.min), abs(self.max))

    @property
    def ch_abs_max(self) -> np.ndarray:
        return np.maximum(np.abs(self.ch_min), np.abs(self.ch_max))

    def scaled(self, factors: np.ndarray) -> "TensorStats":
        """Statistics after every channel i is multiplied by factors[i] > 0."""
        f = np.asarray(factors, dtype=np.float64)
        ch_min = self.ch_min * f
        ch_max = self.ch_max * f
        ch_mean_sq = self.ch_mean_sq * f * f
        return TensorStats(
            min=float(ch_min.min()),
            max=float(ch_max.max()),
            ch_min=ch_min,
            ch_max=ch_max,
            mean_sq=float(ch_mean_sq.mean()),
            ch_mean_sq=ch_mean_sq,
        )

    def to_json(self) -> dict:
        return {
            "min": self.min,
            "max": self.max,
            "per_channel_min": self.ch_min.tolist(),
            "per_channel_max": self.ch_max.tolist(),
            "mean_sq": self.mean_sq,
            "per_channel_mean_sq": self.ch_mean_sq.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "TensorStats":
        return TensorStats(
            min=float(obj["min"]),
            max=float(obj["max"]),
            ch_min=np.asarray(obj["per_channel_min"], dtype=np.float64),
            ch_max=np.asarray(obj["per_channel_max"], dtype=np.float64),
            mean_sq=float(obj["mean_sq"]),
            ch_mean_sq=np.asarray(obj["per_channel_mean_sq"], dtype=np.float64),
        )


class _Accumulator:
    """Order-independent merge of per-sample channel statistics."""

    def __init__(self):
        self.ch_min = None
        self.ch_max = None
        self.ch_sum_sq = None
        self.ch_count = 0

    def update(self, stats, elems_per_channel: int):
        if self.ch_min is None:
            self.ch_min = stats.min.copy()
            self.ch_max = stats.max.copy()
            self.ch_sum_sq = stats.energy.copy()
        else:
            np.minimum(self.ch_min, stats.min, out=self.ch_min)
            np.maximum(self.ch_max, stats.max, out=self.ch_max)
            self.ch_sum_sq += stats.energy
        self.ch_count += elems_per_channel

    def finalize(self) -> TensorStats:
        ch_mean_sq = self.ch_sum_sq / max(self.ch_count, 1)
        return TensorStats(
            min=float(self.ch_min.min()),
            max=float(self.ch_max.max()),
            ch_min=self.ch_min,
            ch_max=self.ch_max,
            mean_sq=float(ch_mean_sq.mean()),
            ch_mean_sq=ch_mean_sq,
        )


@dataclass
class CalibrationRecord:
    """Activation ranges and energies observed on a calibration sample set.

    ``acts`` covers every layer and junction (post-activation outputs);
    ``input_stats`` describes the raw graph input.  ``weight_minmax`` mirrors
    the kernels of the graph the record was calibrated (or analytically
    updated) against.
    """

    acts: dict[str, TensorStats]
    input_stats: TensorStats
    sample_count: int
    weight_minmax: dict[str, tuple[float, float]] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    def act_spec(self, layer_id: str, bits: int = 8) -> QuantSpec:
        stats = self.acts.get(layer_id)
        if stats is None:
            raise CalibrationError(f"no activation statistics for layer {layer_id!r}")
        return QuantSpec.affine(stats.min, stats.max, bits)

    def producer_spec(self, producer_id: str, bits: int = 8) -> QuantSpec:
        """Affine spec of whatever tensor feeds a layer (layer, junction or input)."""
        if producer_id == GRAPH_INPUT:
            return QuantSpec.affine(self.input_stats.min, self.input_stats.max, bits)
        return self.act_spec(producer_id, bits)

    def producer_mean_sq(self, producer_id: str) -> float:
        if producer_id == GRAPH_INPUT:
            return self.input_stats.mean_sq
        stats = self.acts.get(producer_id)
        if stats is None:
            raise CalibrationError(
                f"no energy statistics for {producer_id!r}; calibrate the model first"
            )
        return stats.mean_sq

    def refresh_weights(self, graph) -> None:
        """Re-derive per-layer weight extrema from the (possibly rewritten) graph."""
        for lid in graph.layer_ids:
            kernel = graph.nodes[lid].kernel
            self.weight_minmax[lid] = (float(kernel.min()), float(kernel.max()))

    def copy(self) -> "CalibrationRecord":
        return CalibrationRecord(
            acts={k: replace(v, ch_min=v.ch_min.copy(), ch_max=v.ch_max.copy(),
                             ch_mean_sq=v.ch_mean_sq.copy()) for k, v in self.acts.items()},
            input_stats=replace(self.input_stats),
            sample_count=self.sample_count,
            weight_minmax=dict(self.weight_minmax),
            diagnostics=list(self.diagnostics),
        )

    def to_json(self, graph=None, bits=(8, 8, 16)) -> dict:
        bits_w, bits_a, bits_b = bits
        layers: dict[str, dict] = {}
        for lid, stats in self.acts.items():
            entry: dict = {"activation": {**stats.to_json(), "bits": bits_a}}
            if graph is not None and lid in graph.layer_ids:
                node = graph.nodes[lid]
                w_spec = weight_spec(node, bits_w)
                entry["weights"] = {
                    **w_spec.to_json(),
                    "per_channel_max_abs": kernel_out_channel_max(node).tolist(),
                }
                entry["bias"] = bias_spec(node, self, bits_w=bits_w, bits_b=bits_b).to_json()
            elif lid in self.weight_minmax:
                lo, hi = self.weight_minmax[lid]
                entry["weights"] = {"min": lo, "max": hi, "bits": bits_w}
            layers[lid] = entry
        return {
            "format_version": 1,
            "sample_count": self.sample_count,
            "input": {**self.input_stats.to_json(), "bits": bits_a},
            "layers": layers,
            "diagnostics": self.diagnostics,
        }

    @staticmethod
    def from_json(obj: dict) -> "CalibrationRecord":
        acts = {
            lid: TensorStats.from_json(entry["activation"])
            for lid, entry in obj["layers"].items()
        }
        weight_minmax = {
            lid: (float(entry["weights"]["min"]), float(entry["weights"]["max"]))
            for lid, entry in obj["layers"].items()
            if "weights" in entry
        }
        return CalibrationRecord(
            acts=acts,
            input_stats=TensorStats.from_json(obj["input"]),
            sample_count=int(obj["sample_count"]),
            weight_minmax=weight_minmax,
            diagnostics=list(obj.get("diagnostics", [])),
        )


def kernel_out_channel_max(node) -> np.ndarray:
    """Per-output-channel max |weight| of a conv or depthwise kernel."""
    if node.op == "depthwise":
        k = normalize_depthwise_kernel(node.kernel)
        return np.abs(k).max(axis=(0, 1))
    return np.abs(node.kernel).max(axis=(0, 1, 2))


def kernel_in_channel_max(node) -> np.ndarray:
    """Per-input-channel max |weight| of a conv or depthwise kernel."""
    if node.op == "depthwise":
        k = normalize_depthwise_kernel(node.kernel)
        return np.abs(k).max(axis=(0, 1))
    return np.abs(node.kernel).max(axis=(0, 1, 3))


def weight_spec(node, bits: int = 8) -> QuantSpec:
    return QuantSpec.symmetric(float(np.abs(node.kernel).max()), bits)


def bias_spec(node, calib: CalibrationRecord, bits_w: int = 8, bits_b: int = 16) -> QuantSpec:
    """Bias grid: input-activation step times weight step, widened if that
    range cannot represent the actual bias values (clipping the bias would
    dwarf any rounding effect the grid is meant to model)."""
    in_scale = calib.producer_spec(node.inputs[0], bits=8).scale
    step = in_scale * weight_spec(node, bits_w).scale
    needed = float(np.abs(node.bias).max()) / 2 ** (bits_b - 1)
    return QuantSpec.symmetric_from_scale(max(step, needed), bits_b)


def _sample_pass(graph: "Graph", sample: np.ndarray, tap_ids: set[str]):
    _, tapped = graph.execute(sample, taps=tap_ids)
    out = {}
    for tid, y in tapped.items():
        st = channel_stats(y)
        out[tid] = (st, y.size // y.shape[-1])
    st = channel_stats(np.asarray(sample, dtype=np.float64))
    out[GRAPH_INPUT] = (st, sample.size // sample.shape[-1])
    return out


def calibrate(
    graph: "Graph",
    samples: Iterable[np.ndarray],
    count: int = DEFAULT_CALIBRATION_COUNT,
    threads: int = 1,
) -> CalibrationRecord:
    """Record activation extrema and energies over the first ``count`` samples."""
    if count < 1:
        raise SampleStreamError(f"calibration count must be >= 1, got {count}")
    batch = list(itertools.islice(iter(samples), count))
    if not batch:
        raise SampleStreamError("calibration sample stream is empty")
    if len(batch) < count:
        raise SampleStreamError(
            f"calibration needs {count} samples but the stream yielded {len(batch)}"
        )

    tap_ids = set(graph.layer_ids) | set(graph.junction_ids)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sample: Iterator = pool.map(lambda s: _sample_pass(graph, s, tap_ids), batch)
            per_sample = list(per_sample)
    else:
        per_sample = [_sample_pass(graph, s, tap_ids) for s in batch]

    accs: dict[str, _Accumulator] = {}
    for result in per_sample:  # fixed order keeps float accumulation deterministic
        for tid, (st, elems) in result.items():
            accs.setdefault(tid, _Accumulator()).update(st, elems)

    input_stats = accs.pop(GRAPH_INPUT).finalize()
    acts = {tid: acc.finalize() for tid, acc in accs.items()}

    record = CalibrationRecord(acts=acts, input_stats=input_stats, sample_count=len(batch))
    record.refresh_weights(graph)
    for lid in graph.layer_ids:
        stats = acts[lid]
        if stats.max == stats.min:
            msg = f"layer {lid!r}: degenerate activation range [{stats.min}, {stats.max}]"
            record.diagnostics.append(msg)
            log.warning(msg)
    return record


def quantize_graph(
    graph: "Graph",
    calib: CalibrationRecord,
    mode: str = "full",
    bits_w: int = 8,
    bits_a: int = 8,
    bits_b: int = 16,
) -> "Graph":
    """Return a copy of the graph annotated with fake-quantization wrappers.

    weights-only quantizes kernels (symmetric signed), activations-only the
    post-activation outputs (affine unsigned), full additionally the biases.
    The input graph is left untouched.
    """
    if mode not in QUANT_MODES:
        raise CalibrationError(f"unknown quantization mode {mode!r}; expected {QUANT_MODES}")
    updates = {}
    for lid in graph.layer_ids:
        node = graph.nodes[lid]
        if lid not in calib.acts:
            raise CalibrationError(f"calibration record is missing layer {lid!r}")
        quant = LayerQuant(
            weight=weight_spec(node, bits_w) if mode in ("weights-only", "full") else None,
            act=calib.act_spec(lid, bits_a) if mode in ("activations-only", "full") else None,
            bias=bias_spec(node, calib, bits_w, bits_b) if mode == "full" else None,
        )
        updates[lid] = replace(node, quant=quant)
    return graph.with_nodes(updates)
