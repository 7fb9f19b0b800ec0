"""Command-line client for the quantization service.

Every subcommand builds a request model, validates it locally (config
problems exit with code 2 and a JSON error on stderr) and posts it to the
service API.  Without ``--server`` the app runs in-process, so the CLI works
standalone on local files; with ``--server`` it talks to a remote instance.
Responses are printed as JSON on stdout; runtime failures exit 1.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx
import pydantic

from .service import schemas

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _fail(code: int, error_type: str, message) -> None:
    payload = {"error": {"type": error_type, "message": message}}
    click.echo(json.dumps(payload, indent=2, default=str), err=True)
    sys.exit(code)


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _load_config(config_path: str | None) -> dict:
    if not config_path:
        return {}
    try:
        obj = json.loads(Path(config_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, "ConfigError", f"cannot read config {config_path}: {exc}")
    if not isinstance(obj, dict):
        _fail(EXIT_CONFIG, "ConfigError", f"config {config_path} must be a JSON object")
    return obj


def _request(ctx: click.Context, model: type[pydantic.BaseModel], flags: dict):
    """Merge config-file values with explicit flags and validate."""
    merged = dict(_load_config(ctx.obj.get("config")))
    merged.update({k: v for k, v in flags.items() if v is not None})
    try:
        return model.model_validate(merged)
    except pydantic.ValidationError as exc:
        _fail(EXIT_CONFIG, "ValidationError", json.loads(exc.json()))


def _post(ctx: click.Context, path: str, request: pydantic.BaseModel) -> None:
    with _client(ctx.obj.get("server")) as client:
        try:
            resp = client.post(path, json=request.model_dump())
        except httpx.HTTPError as exc:
            _fail(EXIT_RUNTIME, "TransportError", str(exc))
    if resp.status_code == 422:
        _fail(EXIT_CONFIG, "ValidationError", resp.json())
    if resp.status_code != 200:
        try:
            body = resp.json()
        except ValueError:
            body = resp.text
        _fail(EXIT_RUNTIME, "ServiceError", body)
    click.echo(json.dumps(resp.json(), indent=2))


@click.group()
@click.option("--server", envvar="EQUANT_SERVER", default=None,
              help="Base URL of a running service; default runs in-process.")
@click.option("--config", type=click.Path(), default=None,
              help="JSON file with request fields; explicit flags override it.")
@click.pass_context
def main(ctx: click.Context, server: str | None, config: str | None) -> None:
    """Channel-equalization quantization toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server
    ctx.obj["config"] = config


@main.command()
@click.option("--topology", type=click.Choice(["chain", "residual", "depthwise-chain"]))
@click.option("--layers", type=int)
@click.option("--channels", type=int)
@click.option("--imbalance", type=float)
@click.option("--seed", type=int)
@click.option("--activation", type=click.Choice(["relu", "linear", "prelu", "relu6", "mixed"]))
@click.option("--height", type=int)
@click.option("--width", type=int)
@click.option("--in-channels", type=int)
@click.option("--name")
@click.option("--out-dir")
@click.pass_context
def fixture(ctx, **flags):
    """Generate a deterministic synthetic model."""
    _post(ctx, "/v1/fixture", _request(ctx, schemas.FixtureRequest, flags))


@main.command()
@click.option("--manifest")
@click.option("--weights")
@click.option("--samples", help="fixture:<seed> or dir:<path>")
@click.option("--count", type=int)
@click.option("--bits-w", type=int)
@click.option("--bits-a", type=int)
@click.option("--bits-b", type=int)
@click.option("--threads", type=int)
@click.option("--name")
@click.option("--out-dir")
@click.option("--timestamp/--no-timestamp", default=None)
@click.pass_context
def calibrate(ctx, **flags):
    """Record activation ranges over a sample set."""
    _post(ctx, "/v1/calibrate", _request(ctx, schemas.CalibrateRequest, flags))


@main.command()
@click.option("--manifest")
@click.option("--weights")
@click.option("--calibration")
@click.option("--mode", type=click.Choice(["none", "one-step", "two-step", "two-step-mobilenet"]))
@click.option("--s-max", type=float)
@click.option("--attenuation-floor", type=float)
@click.option("--name")
@click.option("--out-dir")
@click.option("--timestamp/--no-timestamp", default=None)
@click.pass_context
def equalize(ctx, **flags):
    """Rewrite the model so channel extrema are balanced."""
    _post(ctx, "/v1/equalize", _request(ctx, schemas.EqualizeRequest, flags))


@main.command()
@click.option("--manifest")
@click.option("--weights")
@click.option("--calibration")
@click.option("--mode", type=click.Choice(["weights-only", "activations-only", "full"]))
@click.option("--bits-w", type=int)
@click.option("--bits-a", type=int)
@click.option("--bits-b", type=int)
@click.option("--bias-correct/--no-bias-correct", default=None)
@click.option("--bias-count", type=int)
@click.option("--samples")
@click.option("--eval-count", type=int)
@click.option("--name")
@click.option("--out-dir")
@click.option("--timestamp/--no-timestamp", default=None)
@click.pass_context
def quantize(ctx, **flags):
    """Attach fake-quantization specs (optionally bias-corrected)."""
    _post(ctx, "/v1/quantize", _request(ctx, schemas.QuantizeRequest, flags))


@main.command()
@click.option("--model", "models", multiple=True,
              help="manifest,weights,calibration[,label]; repeat to compare runs.")
@click.option("--samples")
@click.option("--count", type=int)
@click.option("--bits-w", type=int)
@click.option("--bits-a", type=int)
@click.option("--bits-b", type=int)
@click.option("--threads", type=int)
@click.option("--sort", type=click.Choice(["by-first-run", "per-run"]))
@click.option("--name")
@click.option("--out-dir")
@click.option("--timestamp/--no-timestamp", default=None)
@click.pass_context
def analyze(ctx, models, **flags):
    """Measure and predict per-layer SQNR; compare multiple runs."""
    parsed = []
    for spec in models:
        parts = [p.strip() for p in spec.split(",")]
        if len(parts) not in (3, 4):
            _fail(EXIT_CONFIG, "ConfigError",
                  f"--model expects manifest,weights,calibration[,label], got {spec!r}")
        ref = {"manifest": parts[0], "weights": parts[1], "calibration": parts[2]}
        if len(parts) == 4:
            ref["label"] = parts[3]
        parsed.append(ref)
    if parsed:
        flags["models"] = parsed
    _post(ctx, "/v1/analyze", _request(ctx, schemas.AnalyzeRequest, flags))


@main.command()
@click.option("--seed", type=int)
@click.option("--imbalance", type=float)
@click.option("--s-max", type=float)
@click.option("--count", type=int)
@click.option("--out-dir")
@click.option("--timestamp/--no-timestamp", default=None)
@click.pass_context
def demo(ctx, **flags):
    """Full pipeline on built-in imbalanced fixtures."""
    _post(ctx, "/v1/demo", _request(ctx, schemas.DemoRequest, flags))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host: str, port: int):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("equant.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
