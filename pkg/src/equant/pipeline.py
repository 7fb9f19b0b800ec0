"""Pipeline stages behind the service endpoints.

Each stage reads and writes persisted artifacts (model manifests + blobs,
calibration JSON, scale/quant sidecars, CSV reports) so every step can be
re-run independently.  All randomness is seeded; artifacts are byte-stable
across runs except for optional timestamp headers.
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import numpy as np

from . import noise
from .equalize import one_step_equalize, two_step_equalize, bias_correct
from .errors import ConfigError, SampleStreamError
from .graph import Graph
from .modelio import (
    Fixture,
    FixtureSpec,
    STREAM_CALIBRATION,
    STREAM_CORRECTION,
    STREAM_HELD_OUT,
    fixture_samples,
    load_model,
    make_fixture,
    save_model,
)
from .quantsim import CalibrationRecord, calibrate, quantize_graph
from .service import schemas

EQUALIZE_PASSES = {
    "one-step": lambda graph, calib, req: one_step_equalize(graph, calib, req.s_max),
    "two-step": lambda graph, calib, req: two_step_equalize(graph, calib, req.s_max, "standard"),
    "two-step-mobilenet": lambda graph, calib, req: two_step_equalize(
        graph, calib, req.s_max, "mobilenet", req.attenuation_floor
    ),
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _meta(timestamp: bool) -> dict:
    return {"generated_at": _now()} if timestamp else {}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _out_dir(req) -> Path:
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_samples(
    ref: str, input_shape: tuple[int, int, int], count: int, stream: int = STREAM_CALIBRATION
) -> list[np.ndarray]:
    """Materialize a sample source reference.

    ``fixture:<seed>`` draws deterministic uniform inputs (the stream tag
    separates calibration, held-out and correction sets); ``dir:<path>``
    reads sorted .npy files, each one sample (rank 3 or 4, channel-last).
    """
    if ref.startswith("fixture:"):
        try:
            seed = int(ref.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad fixture sample reference {ref!r}") from exc
        return list(fixture_samples(input_shape, seed, count, stream))
    if ref.startswith("dir:"):
        root = Path(ref.split(":", 1)[1])
        if not root.is_dir():
            raise SampleStreamError(f"sample directory {root} does not exist")
        files = sorted(root.glob("*.npy"))
        if not files:
            raise SampleStreamError(f"sample directory {root} contains no .npy files")
        if len(files) < count:
            raise SampleStreamError(
                f"sample directory {root} has {len(files)} samples, need {count}"
            )
        out = []
        for f in files[:count]:
            arr = np.asarray(np.load(f), dtype=np.float64)
            if arr.ndim == 3:
                arr = arr[None, ...]
            if arr.ndim != 4 or tuple(arr.shape[1:]) != tuple(input_shape):
                raise SampleStreamError(
                    f"sample {f.name}: shape {arr.shape} does not match model input "
                    f"{tuple(input_shape)}"
                )
            out.append(arr)
        return out
    raise ConfigError(f"unknown sample source {ref!r}; use fixture:<seed> or dir:<path>")


def output_mse(float_graph: Graph, other: Graph, samples: Iterable[np.ndarray]) -> tuple[float, float]:
    """(mean-square output error, mean-square float output) over samples."""
    err = 0.0
    energy = 0.0
    n = 0
    for s in samples:
        ref = float_graph.run(s)
        got = other.run(s)
        err += float(np.sum((got - ref) ** 2))
        energy += float(np.sum(ref * ref))
        n += ref.size
    return err / n, energy / n


# ---------------------------------------------------------------------------
# stages


def run_fixture(req: schemas.FixtureRequest) -> schemas.FixtureResponse:
    out = _out_dir(req)
    fixture = make_fixture(
        FixtureSpec(
            topology=req.topology,
            layers=req.layers,
            channels=req.channels,
            imbalance=req.imbalance,
            seed=req.seed,
            activation=req.activation,
            height=req.height,
            width=req.width,
            in_channels=req.in_channels,
        )
    )
    manifest = out / f"{req.name}.manifest.json"
    weights = out / f"{req.name}.weights.bin"
    save_model(
        fixture.graph,
        manifest,
        weights,
        metadata={"source": "fixture", "spec": req.model_dump(exclude={"out_dir", "name"})},
    )
    return schemas.FixtureResponse(
        manifest=str(manifest),
        weights=str(weights),
        layer_ids=fixture.graph.layer_ids,
        input_shape=list(fixture.graph.input_shape),
    )


def run_calibrate(req: schemas.CalibrateRequest) -> schemas.CalibrateResponse:
    out = _out_dir(req)
    graph = load_model(req.manifest, req.weights)
    samples = resolve_samples(req.samples, graph.input_shape, req.count)
    record = calibrate(graph, samples, count=req.count, threads=req.threads)
    payload = record.to_json(graph, bits=(req.bits_w, req.bits_a, req.bits_b))
    meta = _meta(req.timestamp)
    if meta:
        payload["meta"] = meta
    path = out / f"{req.name}.json"
    _write_json(path, payload)
    return schemas.CalibrateResponse(
        calibration=str(path),
        sample_count=record.sample_count,
        layer_count=len(graph.layer_ids),
        diagnostics=record.diagnostics,
    )


def run_equalize(req: schemas.EqualizeRequest) -> schemas.EqualizeResponse:
    out = _out_dir(req)
    graph = load_model(req.manifest, req.weights)
    record = CalibrationRecord.from_json(json.loads(Path(req.calibration).read_text()))

    if req.mode == "none":
        new_graph, scales, report_entries, new_record, diags = graph, {}, {}, record, []
    else:
        result = EQUALIZE_PASSES[req.mode](graph, record, req)
        new_graph = result.graph
        scales = result.scales
        report_entries = result.report.to_json()
        new_record = result.calibration
        diags = result.diagnostics

    manifest = out / f"{req.name}.manifest.json"
    weights = out / f"{req.name}.weights.bin"
    scales_path = out / f"{req.name}.scales.json"
    calib_path = out / f"{req.name}.calibration.json"
    save_model(
        new_graph,
        manifest,
        weights,
        metadata={"source": Path(req.manifest).name, "equalization": req.mode},
    )
    _write_json(
        scales_path,
        {
            "mode": req.mode,
            "s_max": req.s_max,
            "attenuation_floor": req.attenuation_floor,
            "scales": {lid: sv.to_json() for lid, sv in scales.items()},
            "eligibility": report_entries,
            "diagnostics": diags,
            **({"meta": _meta(req.timestamp)} if req.timestamp else {}),
        },
    )
    calib_payload = new_record.to_json(new_graph)
    if req.timestamp:
        calib_payload["meta"] = _meta(True)
    _write_json(calib_path, calib_payload)
    return schemas.EqualizeResponse(
        manifest=str(manifest),
        weights=str(weights),
        scales=str(scales_path),
        calibration=str(calib_path),
        eligible=[lid for lid, s in report_entries.items() if s == "eligible"],
        skipped={lid: s for lid, s in report_entries.items() if s != "eligible"},
        diagnostics=diags,
    )


def run_quantize(req: schemas.QuantizeRequest) -> schemas.QuantizeResponse:
    out = _out_dir(req)
    graph = load_model(req.manifest, req.weights)
    record = CalibrationRecord.from_json(json.loads(Path(req.calibration).read_text()))
    quant = quantize_graph(graph, record, req.mode, req.bits_w, req.bits_a, req.bits_b)

    corrected = False
    if req.bias_correct:
        samples = resolve_samples(
            req.samples, graph.input_shape, req.bias_count, stream=STREAM_CORRECTION
        )
        quant = bias_correct(graph, quant, samples, count=req.bias_count)
        corrected = True

    eval_samples = resolve_samples(
        req.samples, graph.input_shape, req.eval_count, stream=STREAM_HELD_OUT
    )
    mse, energy = output_mse(graph, quant, eval_samples)

    manifest = out / f"{req.name}.manifest.json"
    weights = out / f"{req.name}.weights.bin"
    sidecar = out / f"{req.name}.quant.json"
    save_model(
        quant,
        manifest,
        weights,
        metadata={"source": Path(req.manifest).name, "quantization": req.mode},
        sidecar={
            "quant": {
                "mode": req.mode,
                "bits": [req.bits_w, req.bits_a, req.bits_b],
                "bias_corrected": corrected,
                "layers": {
                    lid: quant.nodes[lid].quant.to_json() for lid in quant.layer_ids
                },
            },
            **({"meta": _meta(req.timestamp)} if req.timestamp else {}),
        },
        sidecar_path=sidecar,
    )
    return schemas.QuantizeResponse(
        manifest=str(manifest),
        weights=str(weights),
        sidecar=str(sidecar),
        output_mse=mse,
        float_output_energy=energy,
        bias_corrected=corrected,
    )


def _analyze_one(
    graph: Graph,
    record: CalibrationRecord,
    samples: list[np.ndarray],
    req: schemas.AnalyzeRequest,
) -> tuple[noise.SqnrReport, dict]:
    bits = (req.bits_w, req.bits_a, req.bits_b)
    report = noise.measure_sqnr(graph, record, samples, bits=bits, threads=req.threads)
    predicted = noise.predict_sqnr(graph, record, req.bits_w, req.bits_a)
    noise.attach_predictions(report, predicted)

    mse_by_mode = {}
    for mode_key, mode_name in (("w", "weights-only"), ("a", "activations-only"), ("full", "full")):
        qg = quantize_graph(graph, record, mode_name, req.bits_w, req.bits_a, req.bits_b)
        mse, energy = output_mse(graph, qg, samples)
        mse_by_mode[mode_key] = {"output_mse": mse, "float_output_energy": energy}

    oe = {
        target: {
            lid: {"current_db": b.current_db, "oe_db": b.oe_db, "gap_db": b.gap_db}
            for lid, b in noise.optimal_equalization_bound(graph, record, target, req.bits_w
                                                           if target == "weights"
                                                           else req.bits_a).items()
        }
        for target in ("weights", "activations")
    }
    summary = {
        "mean_sqnr_db": {m: report.mean_sqnr_db(m) for m in noise.MODES},
        "output": mse_by_mode,
        "optimal_equalization": oe,
    }
    return report, summary


def run_analyze(req: schemas.AnalyzeRequest) -> schemas.AnalyzeResponse:
    out = _out_dir(req)
    graphs: list[Graph] = []
    records: list[CalibrationRecord] = []
    labels: list[str] = []
    for i, ref in enumerate(req.models):
        graphs.append(load_model(ref.manifest, ref.weights))
        records.append(CalibrationRecord.from_json(json.loads(Path(ref.calibration).read_text())))
        labels.append(ref.label or f"run{i}")
    shapes = {g.input_shape for g in graphs}
    if len(shapes) != 1:
        raise ConfigError(f"models have different input shapes: {sorted(shapes)}")

    samples = resolve_samples(req.samples, graphs[0].input_shape, req.count)
    header = f"generated {_now()}" if req.timestamp else None

    reports = []
    summaries = {}
    report_paths = []
    for graph, record, label in zip(graphs, records, labels):
        report, summary = _analyze_one(graph, record, samples, req)
        reports.append(report)
        summaries[label] = summary
        path = out / f"{req.name}.{label}.sqnr.csv"
        path.write_text(report.to_csv(header_comment=header))
        report_paths.append(str(path))

    comparison_path = None
    if len(reports) > 1:
        comparison = noise.compare_runs(reports, labels, sort=req.sort, header_comment=header)
        cpath = out / f"{req.name}.comparison.csv"
        cpath.write_text(comparison)
        comparison_path = str(cpath)

    summary_payload = {
        "sample_count": len(samples),
        "bits": [req.bits_w, req.bits_a, req.bits_b],
        "estimator": "sample-mean energies over the analysis sample set",
        "runs": summaries,
        **({"meta": _meta(True)} if req.timestamp else {}),
    }
    summary_path = out / f"{req.name}.summary.json"
    _write_json(summary_path, summary_payload)
    return schemas.AnalyzeResponse(
        reports=report_paths,
        comparison=comparison_path,
        summary=str(summary_path),
        summary_data=summary_payload,
    )


def run_demo(req: schemas.DemoRequest) -> schemas.DemoResponse:
    """End-to-end run on built-in imbalanced fixtures, checking that channel
    equalization raises activation SQNR and lowers quantized output error.

    The plain chain uses the standard two-step pass; the depthwise chain
    uses the attenuation variant, which is the applicable form when
    per-channel kernels double as the successor's input extrema.
    """
    out = _out_dir(req)
    results = {}
    for topology, two_step_mode in (
        ("chain", "two-step"),
        ("depthwise-chain", "two-step-mobilenet"),
    ):
        base = schemas.FixtureRequest(
            topology=topology,
            layers=5,
            channels=8,
            imbalance=req.imbalance,
            seed=req.seed,
            out_dir=str(out / topology),
            name="model",
        )
        fx = run_fixture(base)
        cal = run_calibrate(
            schemas.CalibrateRequest(
                manifest=fx.manifest,
                weights=fx.weights,
                samples=f"fixture:{req.seed}",
                count=req.count,
                out_dir=str(out / topology),
                timestamp=req.timestamp,
            )
        )
        variants = {"none": (fx.manifest, fx.weights, cal.calibration)}
        for mode in ("one-step", two_step_mode):
            eq = run_equalize(
                schemas.EqualizeRequest(
                    manifest=fx.manifest,
                    weights=fx.weights,
                    calibration=cal.calibration,
                    mode=mode,
                    s_max=req.s_max,
                    name=mode,
                    out_dir=str(out / topology),
                    timestamp=req.timestamp,
                )
            )
            variants[mode] = (eq.manifest, eq.weights, eq.calibration)

        analysis = run_analyze(
            schemas.AnalyzeRequest(
                models=[
                    schemas.ModelRef(
                        manifest=m, weights=w, calibration=c, label=label
                    )
                    for label, (m, w, c) in variants.items()
                ],
                samples=f"fixture:{req.seed}",
                count=req.count,
                name="demo",
                out_dir=str(out / topology),
                timestamp=req.timestamp,
            )
        )
        runs = analysis.summary_data["runs"]
        mean_a = {label: runs[label]["mean_sqnr_db"]["a"] for label in variants}
        mse = {label: runs[label]["output"]["full"]["output_mse"] for label in variants}
        best_mse = min(mse[label] for label in variants if label != "none")
        results[topology] = {
            "two_step_mode": two_step_mode,
            "mean_activation_sqnr_db": mean_a,
            "full_quant_output_mse": mse,
            "sqnr_improved": all(
                mean_a[label] > mean_a["none"] for label in variants if label != "none"
            ),
            "mse_reduction_best": mse["none"] / best_mse if best_mse > 0 else float("inf"),
            "analysis": analysis.summary,
            "comparison": analysis.comparison,
        }

    payload = {
        "fixtures": results,
        "all_improved": all(
            r["sqnr_improved"] and r["mse_reduction_best"] > 1.0 for r in results.values()
        ),
        **({"meta": _meta(True)} if req.timestamp else {}),
    }
    summary_path = out / "demo.summary.json"
    _write_json(summary_path, payload)
    return schemas.DemoResponse(summary=str(summary_path), summary_data=payload)
