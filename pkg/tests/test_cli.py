import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from equant.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args)
    assert result.exit_code == 0, result.output
    return json.loads(result.output)


def build_pipeline(runner, out):
    fx = run_ok(runner, [
        "fixture", "--topology", "chain", "--layers", "4", "--channels", "6",
        "--imbalance", "50", "--seed", "0", "--out-dir", str(out),
    ])
    cal = run_ok(runner, [
        "calibrate", "--manifest", fx["manifest"], "--weights", fx["weights"],
        "--samples", "fixture:0", "--count", "16", "--out-dir", str(out),
        "--no-timestamp",
    ])
    return fx, cal


def test_fixture_and_calibrate(runner, tmp_path):
    fx, cal = build_pipeline(runner, tmp_path)
    assert Path(fx["manifest"]).exists()
    assert Path(cal["calibration"]).exists()
    assert cal["layer_count"] == 4


def test_single_sample_calibration_works(runner, tmp_path):
    fx, _ = build_pipeline(runner, tmp_path)
    cal = run_ok(runner, [
        "calibrate", "--manifest", fx["manifest"], "--weights", fx["weights"],
        "--count", "1", "--out-dir", str(tmp_path), "--name", "one",
    ])
    assert cal["sample_count"] == 1


def test_equalize_and_quantize_and_analyze(runner, tmp_path):
    fx, cal = build_pipeline(runner, tmp_path)
    eq = run_ok(runner, [
        "equalize", "--manifest", fx["manifest"], "--weights", fx["weights"],
        "--calibration", cal["calibration"], "--mode", "one-step",
        "--out-dir", str(tmp_path), "--no-timestamp",
    ])
    assert eq["eligible"]
    q = run_ok(runner, [
        "quantize", "--manifest", eq["manifest"], "--weights", eq["weights"],
        "--calibration", eq["calibration"], "--mode", "full",
        "--samples", "fixture:0", "--out-dir", str(tmp_path), "--no-timestamp",
    ])
    assert q["output_mse"] > 0
    an = run_ok(runner, [
        "analyze",
        "--model", f"{fx['manifest']},{fx['weights']},{cal['calibration']},pre",
        "--model", f"{eq['manifest']},{eq['weights']},{eq['calibration']},post",
        "--samples", "fixture:0", "--count", "16",
        "--out-dir", str(tmp_path), "--no-timestamp",
    ])
    assert an["comparison"] is not None


def test_config_file_with_flag_overrides(runner, tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({
        "topology": "chain", "layers": 3, "channels": 4,
        "out_dir": str(tmp_path / "from_config"),
    }))
    fx = run_ok(runner, ["--config", str(config), "fixture", "--layers", "5"])
    assert len(fx["layer_ids"]) == 5  # flag wins over config
    assert str(tmp_path / "from_config") in fx["manifest"]


def test_config_error_exits_2_with_json(runner, tmp_path):
    result = runner.invoke(main, ["fixture", "--layers", "1",
                                  "--out-dir", str(tmp_path)])
    assert result.exit_code == 2
    err = json.loads(result.stderr)
    assert err["error"]["type"] == "ValidationError"


def test_missing_required_field_exits_2(runner):
    result = runner.invoke(main, ["fixture"])  # out_dir missing
    assert result.exit_code == 2
    err = json.loads(result.stderr)
    assert err["error"]["type"] == "ValidationError"


def test_unknown_flag_exits_2(runner):
    result = runner.invoke(main, ["fixture", "--bogus", "1"])
    assert result.exit_code == 2


def test_runtime_failure_exits_1(runner, tmp_path):
    result = runner.invoke(main, [
        "calibrate", "--manifest", str(tmp_path / "nope.json"),
        "--weights", str(tmp_path / "nope.bin"), "--out-dir", str(tmp_path),
    ])
    assert result.exit_code == 1
    err = json.loads(result.stderr)
    assert err["error"]["type"] == "ServiceError"


def test_bad_model_triple_exits_2(runner, tmp_path):
    result = runner.invoke(main, ["analyze", "--model", "only-one-part",
                                  "--out-dir", str(tmp_path)])
    assert result.exit_code == 2


def test_demo_command(runner, tmp_path):
    out = run_ok(runner, ["demo", "--out-dir", str(tmp_path), "--count", "16",
                          "--no-timestamp"])
    assert out["summary_data"]["all_improved"] is True


def test_pipeline_artifacts_are_deterministic(runner, tmp_path):
    """Identical config and seed produce byte-identical artifacts."""
    outputs = []
    for run in ("one", "two"):
        out = tmp_path / run
        fx = run_ok(runner, [
            "fixture", "--topology", "chain", "--layers", "4", "--channels", "6",
            "--imbalance", "100", "--seed", "7", "--out-dir", str(out),
        ])
        cal = run_ok(runner, [
            "calibrate", "--manifest", fx["manifest"], "--weights", fx["weights"],
            "--samples", "fixture:7", "--count", "16", "--out-dir", str(out),
            "--no-timestamp",
        ])
        eq = run_ok(runner, [
            "equalize", "--manifest", fx["manifest"], "--weights", fx["weights"],
            "--calibration", cal["calibration"], "--mode", "two-step",
            "--out-dir", str(out), "--no-timestamp",
        ])
        run_ok(runner, [
            "analyze",
            "--model", f"{eq['manifest']},{eq['weights']},{eq['calibration']},eq",
            "--samples", "fixture:7", "--count", "16",
            "--out-dir", str(out), "--no-timestamp",
        ])
        outputs.append(out)

    first, second = outputs
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
