"""FastAPI app exposing the pipeline stages.

Domain errors surface as HTTP 400 with a structured JSON body; request
validation failures keep FastAPI's native 422 shape.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import EquantError
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="equant", version=__version__)

    @app.exception_handler(EquantError)
    async def _domain_error(_request: Request, exc: EquantError) -> JSONResponse:
        body = schemas.ErrorResponse(
            error=schemas.ErrorDetail(type=type(exc).__name__, message=str(exc))
        )
        return JSONResponse(status_code=400, content=body.model_dump())

    @app.get("/healthz", response_model=schemas.ServiceInfo)
    def healthz() -> schemas.ServiceInfo:
        return schemas.ServiceInfo(name="equant", version=__version__, status="ok")

    @app.post("/v1/fixture", response_model=schemas.FixtureResponse)
    def fixture(req: schemas.FixtureRequest) -> schemas.FixtureResponse:
        return pipeline.run_fixture(req)

    @app.post("/v1/calibrate", response_model=schemas.CalibrateResponse)
    def calibrate(req: schemas.CalibrateRequest) -> schemas.CalibrateResponse:
        return pipeline.run_calibrate(req)

    @app.post("/v1/equalize", response_model=schemas.EqualizeResponse)
    def equalize(req: schemas.EqualizeRequest) -> schemas.EqualizeResponse:
        return pipeline.run_equalize(req)

    @app.post("/v1/quantize", response_model=schemas.QuantizeResponse)
    def quantize(req: schemas.QuantizeRequest) -> schemas.QuantizeResponse:
        return pipeline.run_quantize(req)

    @app.post("/v1/analyze", response_model=schemas.AnalyzeResponse)
    def analyze(req: schemas.AnalyzeRequest) -> schemas.AnalyzeResponse:
        return pipeline.run_analyze(req)

    @app.post("/v1/demo", response_model=schemas.DemoResponse)
    def demo(req: schemas.DemoRequest) -> schemas.DemoResponse:
        return pipeline.run_demo(req)

    return app


app = create_app()
