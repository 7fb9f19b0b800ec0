"""Per-layer SQNR measurement, analytic prediction, and equalization bounds.

SQNR of a tensor Y against its quantized counterpart is the ratio of the
mean-square signal to the mean-square error, reported in dB.  The analytic
predictor treats every quantization error as a uniform, zero-centered,
independent process whose variance is step**2 / 12, and propagates variances
through successor kernels.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import CalibrationError, EquantError
from .graph import Graph, JunctionNode, LayerNode
from .quantsim import (
    GRAPH_INPUT,
    CalibrationRecord,
    QuantSpec,
    kernel_out_channel_max,
    quantize_graph,
    weight_spec,
)
from .tensors import normalize_depthwise_kernel

MODES = ("w", "a", "full")
_MODE_NAMES = {"w": "weights-only", "a": "activations-only", "full": "full"}

CSV_COLUMNS = (
    "layer_id",
    "topo_index",
    "signal_energy",
    "noise_w",
    "noise_a",
    "noise_full",
    "sqnr_w_db",
    "sqnr_a_db",
    "sqnr_full_db",
    "pred_sqnr_w_db",
    "pred_sqnr_a_db",
)


def to_db(linear: float | None) -> float | None:
    if linear is None:
        return None
    if math.isinf(linear):
        return math.inf
    return 10.0 * math.log10(linear)


def sqnr_linear(signal: float, noise: float) -> float | None:
    """None when the signal energy vanishes, inf when the noise does."""
    if signal == 0.0:
        return None
    if noise == 0.0:
        return math.inf
    return signal / noise


def _render(value: float | None) -> str:
    if value is None:
        return "undefined"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


@dataclass
class LayerSqnr:
    """Measured energies for one layer under the three quantization modes."""

    layer_id: str
    topo_index: int
    signal_energy: float
    noise: dict[str, float]  # mode -> mean-square error
    pred_sqnr_w_db: float | None = None
    pred_sqnr_a_db: float | None = None

    def sqnr(self, mode: str) -> float | None:
        return sqnr_linear(self.signal_energy, self.noise[mode])

    def sqnr_db(self, mode: str) -> float | None:
        return to_db(self.sqnr(mode))


@dataclass
class SqnrReport:
    """Per-layer SQNR table for one model + calibration + sample set."""

    layers: list[LayerSqnr]
    sample_count: int
    bits: tuple[int, int, int]
    notes: list[str] = field(default_factory=list)

    def layer(self, layer_id: str) -> LayerSqnr:
        for row in self.layers:
            if row.layer_id == layer_id:
                return row
        raise EquantError(f"report has no layer {layer_id!r}")

    def mean_sqnr_db(self, mode: str) -> float:
        vals = [row.sqnr_db(mode) for row in self.layers]
        finite = [v for v in vals if v is not None and math.isfinite(v)]
        if not finite:
            raise EquantError("no finite SQNR values to average")
        return float(np.mean(finite))

    def to_csv(self, header_comment: str | None = None) -> str:
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append(",".join(CSV_COLUMNS))
        for row in self.layers:
            lines.append(
                ",".join(
                    [
                        row.layer_id,
                        str(row.topo_index),
                        _render(row.signal_energy),
                        _render(row.noise["w"]),
                        _render(row.noise["a"]),
                        _render(row.noise["full"]),
                        _render(row.sqnr_db("w")),
                        _render(row.sqnr_db("a")),
                        _render(row.sqnr_db("full")),
                        _render(row.pred_sqnr_w_db),
                        _render(row.pred_sqnr_a_db),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "bits": list(self.bits),
            "notes": self.notes,
            "layers": [
                {
                    "layer_id": row.layer_id,
                    "topo_index": row.topo_index,
                    "signal_energy": row.signal_energy,
                    "noise": dict(row.noise),
                    "sqnr_db": {m: row.sqnr_db(m) for m in MODES},
                    "pred_sqnr_w_db": row.pred_sqnr_w_db,
                    "pred_sqnr_a_db": row.pred_sqnr_a_db,
                }
                for row in self.layers
            ],
        }


def _tap_errors(graph: Graph, variants: dict[str, Graph], sample: np.ndarray,
                layer_ids: list[str]):
    _, float_taps = graph.execute(sample, taps=layer_ids)
    per_layer: dict[str, tuple[float, dict[str, float], int]] = {}
    variant_taps = {
        mode: vg.execute(sample, taps=layer_ids).taps for mode, vg in variants.items()
    }
    for lid in layer_ids:
        ref = float_taps[lid]
        sig = float(np.sum(ref * ref))
        errs = {}
        for mode in MODES:
            d = variant_taps[mode][lid] - ref
            errs[mode] = float(np.sum(d * d))
        per_layer[lid] = (sig, errs, ref.size)
    return per_layer


def measure_sqnr(
    float_graph: Graph,
    calib: CalibrationRecord,
    samples: Iterable[np.ndarray],
    bits: tuple[int, int, int] = (8, 8, 16),
    threads: int = 1,
) -> SqnrReport:
    """Run the float graph and its three fake-quantized variants on identical
    samples and accumulate per-layer signal and error energies."""
    bits_w, bits_a, bits_b = bits
    variants = {
        mode: quantize_graph(float_graph, calib, _MODE_NAMES[mode], bits_w, bits_a, bits_b)
        for mode in MODES
    }
    layer_ids = float_graph.layer_ids
    batch = [np.asarray(s, dtype=np.float64) for s in samples]
    if not batch:
        raise EquantError("measure_sqnr: sample stream is empty")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda s: _tap_errors(float_graph, variants, s, layer_ids), batch)
            )
    else:
        results = [_tap_errors(float_graph, variants, s, layer_ids) for s in batch]

    sig_acc = {lid: 0.0 for lid in layer_ids}
    err_acc = {lid: {m: 0.0 for m in MODES} for lid in layer_ids}
    count = {lid: 0 for lid in layer_ids}
    for res in results:  # fixed order: deterministic accumulation
        for lid, (sig, errs, n) in res.items():
            sig_acc[lid] += sig
            count[lid] += n
            for m in MODES:
                err_acc[lid][m] += errs[m]

    topo_index = {nid: i for i, nid in enumerate(float_graph.order)}
    rows = [
        LayerSqnr(
            layer_id=lid,
            topo_index=topo_index[lid],
            signal_energy=sig_acc[lid] / count[lid],
            noise={m: err_acc[lid][m] / count[lid] for m in MODES},
        )
        for lid in layer_ids
    ]
    return SqnrReport(rows, sample_count=len(batch), bits=bits)


@dataclass
class PredictedNoise:
    """Uniform-model noise variances at one layer's output."""

    layer_id: str
    signal: float
    own_var_w: float
    own_var_a: float
    var_w: float  # cumulative, own + propagated
    var_a: float

    @property
    def sqnr_w_db(self) -> float | None:
        return to_db(sqnr_linear(self.signal, self.var_w))

    @property
    def sqnr_a_db(self) -> float | None:
        return to_db(sqnr_linear(self.signal, self.var_a))


def _passthrough(node: LayerNode) -> float:
    """Mean output-channel gain applied to white input noise by a kernel."""
    if node.op == "depthwise":
        k = normalize_depthwise_kernel(node.kernel)
        return float(np.sum(k * k)) / k.shape[2]
    return float(np.sum(node.kernel * node.kernel)) / node.kernel.shape[3]


def predict_sqnr(
    graph: Graph,
    calib: CalibrationRecord,
    bits_w: int = 8,
    bits_a: int = 8,
) -> dict[str, PredictedNoise]:
    """Predict per-layer SQNR from calibrated ranges and energies.

    Weight noise at a layer is kh*kw * c_in * E{X^2} * step_w^2/12 (c_in = 1
    for depthwise); activation noise is step_a^2/12.  Upstream variances
    propagate through each consumer kernel's mean squared-weight sum; the
    interaction of upstream noise with downstream weight noise is neglected.
    """
    var_w: dict[str, float] = {GRAPH_INPUT: 0.0}
    var_a: dict[str, float] = {GRAPH_INPUT: 0.0}
    out: dict[str, PredictedNoise] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if isinstance(node, LayerNode):
            pid = node.inputs[0]
            ex2 = calib.producer_mean_sq(pid)
            stats = calib.acts.get(nid)
            if stats is None:
                raise CalibrationError(
                    f"no calibration statistics for layer {nid!r}; run calibration "
                    f"with energy tracking first"
                )
            kh, kw = (
                normalize_depthwise_kernel(node.kernel).shape[:2]
                if node.op == "depthwise"
                else node.kernel.shape[:2]
            )
            fan_in = 1 if node.op == "depthwise" else node.kernel.shape[2]
            w_step = weight_spec(node, bits_w).scale
            a_step = QuantSpec.affine(stats.min, stats.max, bits_a).scale
            own_w = kh * kw * fan_in * ex2 * (w_step * w_step / 12.0)
            own_a = a_step * a_step / 12.0
            gain = _passthrough(node)
            var_w[nid] = own_w + gain * var_w[pid]
            var_a[nid] = own_a + gain * var_a[pid]
            out[nid] = PredictedNoise(
                layer_id=nid,
                signal=stats.mean_sq,
                own_var_w=own_w,
                own_var_a=own_a,
                var_w=var_w[nid],
                var_a=var_a[nid],
            )
        elif isinstance(node, JunctionNode):
            if node.kind == "add":
                var_w[nid] = sum(var_w[ref] for ref in node.inputs)
                var_a[nid] = sum(var_a[ref] for ref in node.inputs)
            else:  # concat: channel-weighted mean of per-element variances
                widths = [graph.channels[ref] for ref in node.inputs]
                total = sum(widths)
                var_w[nid] = sum(w * var_w[ref] for w, ref in zip(widths, node.inputs)) / total
                var_a[nid] = sum(w * var_a[ref] for w, ref in zip(widths, node.inputs)) / total
        else:
            raise EquantError("predict_sqnr requires a batchnorm-folded graph")
    return out


def attach_predictions(report: SqnrReport, predicted: dict[str, PredictedNoise]) -> None:
    for row in report.layers:
        pred = predicted.get(row.layer_id)
        if pred is not None:
            row.pred_sqnr_w_db = pred.sqnr_w_db
            row.pred_sqnr_a_db = pred.sqnr_a_db


@dataclass
class OeBound:
    """SQNR a layer would attain if all channel extrema were equal."""

    layer_id: str
    target: str
    current_db: float | None
    oe_db: float | None

    @property
    def gap_db(self) -> float | None:
        if self.current_db is None or self.oe_db is None:
            return None
        return self.oe_db - self.current_db


def optimal_equalization_bound(
    graph: Graph,
    calib: CalibrationRecord,
    target: str,
    bits: int = 8,
) -> dict[str, OeBound]:
    """Upper bound: rescale every channel so its extremum matches the layer
    extremum, keeping the quantization step fixed.  Noise is estimated from
    the uniform model; the signal energy is measured (weights) or calibrated
    (activations)."""
    if target not in ("weights", "activations"):
        raise EquantError(f"unknown OE target {target!r}")
    out: dict[str, OeBound] = {}
    for lid in graph.layer_ids:
        node = graph.nodes[lid]
        if target == "weights":
            kernel = (
                normalize_depthwise_kernel(node.kernel)
                if node.op == "depthwise"
                else node.kernel
            )
            flat = kernel.reshape(-1, kernel.shape[-1]) if node.op == "conv" else \
                kernel.reshape(-1, kernel.shape[2])
            energies = np.sum(flat * flat, axis=0)
            extrema = kernel_out_channel_max(node)
            step = weight_spec(node, bits).scale
        else:
            stats = calib.acts.get(lid)
            if stats is None:
                raise CalibrationError(f"no calibration statistics for layer {lid!r}")
            energies = stats.ch_mean_sq
            extrema = stats.ch_abs_max
            step = QuantSpec.affine(stats.min, stats.max, bits).scale
        noise = step * step / 12.0
        m = float(extrema.max())
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(extrema > 0.0, m / extrema, 1.0)
        cur = sqnr_linear(float(energies.mean()), noise)
        oe = sqnr_linear(float((energies * ratios * ratios).mean()), noise)
        out[lid] = OeBound(lid, target, to_db(cur), to_db(oe))
    return out


def _sort_key(value: float | None) -> float:
    if value is None:
        return -math.inf
    return value


def compare_runs(
    reports: list[SqnrReport],
    labels: list[str] | None = None,
    sort: str = "by-first-run",
    header_comment: str | None = None,
) -> str:
    """CSV comparing several reports, one column per run per mode.

    ``by-first-run`` orders rows by the first run's activation SQNR (largest
    first) and keeps layer correspondence; ``per-run`` sorts every column
    independently, which compares curve shapes rather than layers.
    """
    if not reports:
        raise EquantError("compare_runs needs at least one report")
    if sort not in ("by-first-run", "per-run"):
        raise EquantError(f"unknown sort {sort!r}")
    labels = labels or [f"run{i}" for i in range(len(reports))]
    if len(labels) != len(reports):
        raise EquantError("one label per report required")
    base_ids = [row.layer_id for row in reports[0].layers]
    for rep in reports[1:]:
        if {row.layer_id for row in rep.layers} != set(base_ids):
            raise EquantError("reports cover different layer sets")

    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    cols = ["index"]
    if sort == "by-first-run":
        cols.append("layer_id")
    for label in labels:
        for mode in MODES:
            cols.append(f"{label}_sqnr_{mode}_db")
    lines.append(",".join(cols))

    if sort == "by-first-run":
        order = sorted(
            base_ids,
            key=lambda lid: _sort_key(reports[0].layer(lid).sqnr_db("a")),
            reverse=True,
        )
        for i, lid in enumerate(order):
            cells = [str(i), lid]
            for rep in reports:
                row = rep.layer(lid)
                cells.extend(_render(row.sqnr_db(mode)) for mode in MODES)
            lines.append(",".join(cells))
    else:
        columns = []
        for rep in reports:
            for mode in MODES:
                vals = sorted(
                    (row.sqnr_db(mode) for row in rep.layers),
                    key=_sort_key,
                    reverse=True,
                )
                columns.append(vals)
        for i in range(len(base_ids)):
            cells = [str(i)] + [_render(col[i]) for col in columns]
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
