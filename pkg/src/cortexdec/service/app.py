"""FastAPI surface over the decoding pipeline.

Config and file-format problems map to 400, anything that breaks mid-run
(divergence, unexpected faults) to 500; request validation errors are
FastAPI's usual 422.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import ConfigError, CortexdecError, DataFormatError
from ..runtime import tune_allocator
from . import handlers
from . import schemas as sch


def create_app() -> FastAPI:
    tune_allocator()
    app = FastAPI(title="cortexdec", version=__version__)

    @app.exception_handler(ConfigError)
    @app.exception_handler(DataFormatError)
    async def bad_request(request: Request, exc: CortexdecError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def missing_file(request: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(CortexdecError)
    async def runtime_failure(request: Request, exc: CortexdecError):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/synth", response_model=sch.SynthResponse)
    def synth(req: sch.SynthRequest):
        return handlers.run_synth(req)

    @app.post("/preprocess", response_model=sch.PreprocessResponse)
    def preprocess(req: sch.PreprocessRequest):
        return handlers.run_preprocess(req)

    @app.post("/train", response_model=sch.TrainResponse)
    def train(req: sch.TrainRequest):
        return handlers.run_train(req)

    @app.post("/eval", response_model=sch.EvalResponse)
    def evaluate(req: sch.EvalRequest):
        return handlers.run_eval(req)

    @app.post("/ablate", response_model=sch.AblateResponse)
    def ablate(req: sch.AblateRequest):
        return handlers.run_ablate(req)

    @app.post("/report", response_model=sch.ReportResponse)
    def report(req: sch.ReportRequest):
        return handlers.run_report(req)

    return app


app = create_app()
