"""Request/response models for the HTTP API (and the CLI that wraps it).

Paths in requests are interpreted on the service host; the bundled CLI runs
the app in-process by default, so paths behave as local files.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

Topology = Literal["chain", "residual", "depthwise-chain"]
FixtureActivation = Literal["relu", "linear", "prelu", "relu6", "mixed"]
EqualizationMode = Literal["none", "one-step", "two-step", "two-step-mobilenet"]
QuantMode = Literal["weights-only", "activations-only", "full"]
SortMode = Literal["by-first-run", "per-run"]


class FixtureRequest(BaseModel):
    topology: Topology = "chain"
    layers: int = Field(5, ge=2, le=64)
    channels: int = Field(8, ge=1, le=256)
    imbalance: float = Field(1.0, ge=1.0)
    seed: int = 0
    activation: FixtureActivation = "relu"
    height: int = Field(8, ge=3, le=64)
    width: int = Field(8, ge=3, le=64)
    in_channels: int = Field(3, ge=1, le=64)
    name: str = "fixture"
    out_dir: str


class FixtureResponse(BaseModel):
    manifest: str
    weights: str
    layer_ids: list[str]
    input_shape: list[int]


class CalibrateRequest(BaseModel):
    manifest: str
    weights: str
    samples: str = Field("fixture:0", description="fixture:<seed> or dir:<path>")
    count: int = Field(64, ge=1)
    bits_w: int = Field(8, ge=2, le=24)
    bits_a: int = Field(8, ge=2, le=24)
    bits_b: int = Field(16, ge=2, le=24)
    threads: int = Field(1, ge=1, le=64)
    name: str = "calibration"
    out_dir: str
    timestamp: bool = True


class CalibrateResponse(BaseModel):
    calibration: str
    sample_count: int
    layer_count: int
    diagnostics: list[str]


class EqualizeRequest(BaseModel):
    manifest: str
    weights: str
    calibration: str
    mode: EqualizationMode = "one-step"
    s_max: float = Field(16.0, ge=1.0)
    attenuation_floor: float = Field(0.7, gt=0.0, le=1.0)
    name: str = "equalized"
    out_dir: str
    timestamp: bool = True


class EqualizeResponse(BaseModel):
    manifest: str
    weights: str
    scales: str
    calibration: str
    eligible: list[str]
    skipped: dict[str, str]
    diagnostics: list[str]


class QuantizeRequest(BaseModel):
    manifest: str
    weights: str
    calibration: str
    mode: QuantMode = "full"
    bits_w: int = Field(8, ge=2, le=24)
    bits_a: int = Field(8, ge=2, le=24)
    bits_b: int = Field(16, ge=2, le=24)
    bias_correct: bool = False
    bias_count: int = Field(1000, ge=1)
    samples: str = "fixture:0"
    eval_count: int = Field(32, ge=1)
    name: str = "quantized"
    out_dir: str
    timestamp: bool = True


class QuantizeResponse(BaseModel):
    manifest: str
    weights: str
    sidecar: str
    output_mse: float
    float_output_energy: float
    bias_corrected: bool


class ModelRef(BaseModel):
    manifest: str
    weights: str
    calibration: str
    label: str = ""


class AnalyzeRequest(BaseModel):
    models: list[ModelRef] = Field(min_length=1)
    samples: str = "fixture:0"
    count: int = Field(64, ge=1)
    bits_w: int = Field(8, ge=2, le=24)
    bits_a: int = Field(8, ge=2, le=24)
    bits_b: int = Field(16, ge=2, le=24)
    threads: int = Field(1, ge=1, le=64)
    sort: SortMode = "by-first-run"
    name: str = "analysis"
    out_dir: str
    timestamp: bool = True


class AnalyzeResponse(BaseModel):
    reports: list[str]
    comparison: str | None
    summary: str
    summary_data: dict


class DemoRequest(BaseModel):
    seed: int = 0
    imbalance: float = Field(100.0, ge=1.0)
    s_max: float = Field(16.0, ge=1.0)
    count: int = Field(64, ge=1)
    out_dir: str
    timestamp: bool = True


class DemoResponse(BaseModel):
    summary: str
    summary_data: dict


class ServiceInfo(BaseModel):
    name: str
    version: str
    status: str


class ErrorDetail(BaseModel):
    type: str
    message: str


class ErrorResponse(BaseModel):
    error: ErrorDetail
