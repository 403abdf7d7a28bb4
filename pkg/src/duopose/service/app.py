"""FastAPI application wrapping the pipeline stages.

Validation problems (bad config, missing files) map to HTTP 400; failures
inside a running stage map to HTTP 500 with a structured body. The CLI
turns these into exit codes 1 and 2 respectively.
"""

from fastapi import FastAPI, HTTPException

from .. import pipeline
from ..config import ExperimentConfig, load_config
from ..errors import ConfigError, DuoposeError
from .schemas import (
    AuditRequest,
    EvaluateRequest,
    GenerateRequest,
    PlotTraceRequest,
    ReconstructRequest,
    StageRequest,
    StageResponse,
    TrainDiffusionRequest,
    TrainPriorRequest,
)


def _config(req: StageRequest, stage: str) -> ExperimentConfig:
    try:
        return load_config(req.config_path, req.overrides or None)
    except ConfigError as exc:
        raise HTTPException(
            status_code=400,
            detail={"stage": stage, "kind": "ConfigError", "message": str(exc)},
        ) from exc


def _run(stage: str, fn, *args, **kwargs) -> dict:
    try:
        return fn(*args, **kwargs)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        raise HTTPException(
            status_code=400,
            detail={"stage": stage, "kind": type(exc).__name__, "message": str(exc)},
        ) from exc
    except DuoposeError as exc:
        raise HTTPException(
            status_code=500,
            detail={"stage": stage, "kind": type(exc).__name__, "message": str(exc)},
        ) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="duopose", description="Two-person interaction reconstruction")

    @app.get("/health")
    def health() -> dict:
        return {"ok": True}

    @app.post("/generate", response_model=StageResponse)
    def generate(req: GenerateRequest) -> StageResponse:
        cfg = _config(req, "generate")
        result = _run("generate", pipeline.run_generate, cfg)
        return StageResponse(stage="generate", result=result)

    @app.post("/train/prior", response_model=StageResponse)
    def train_prior(req: TrainPriorRequest) -> StageResponse:
        cfg = _config(req, "train-prior")
        result = _run("train-prior", pipeline.run_train_prior, cfg)
        return StageResponse(stage="train-prior", result=result)

    @app.post("/train/diffusion", response_model=StageResponse)
    def train_diffusion(req: TrainDiffusionRequest) -> StageResponse:
        cfg = _config(req, "train-diffusion")
        result = _run("train-diffusion", pipeline.run_train_diffusion, cfg)
        return StageResponse(stage="train-diffusion", result=result)

    @app.post("/reconstruct", response_model=StageResponse)
    def reconstruct(req: ReconstructRequest) -> StageResponse:
        cfg = _config(req, "reconstruct")
        result = _run(
            "reconstruct",
            pipeline.run_reconstruct,
            cfg,
            split=req.split,
            tag=req.tag,
            steps=req.steps,
            physics=req.physics,
            single_branch=req.single_branch,
            use_prior=req.use_prior,
        )
        return StageResponse(stage="reconstruct", result=result)

    @app.post("/evaluate", response_model=StageResponse)
    def evaluate(req: EvaluateRequest) -> StageResponse:
        cfg = _config(req, "evaluate")

        def _eval(cfg):
            _, summary = pipeline.run_evaluate(cfg, tag=req.tag, split=req.split)
            return summary

        result = _run("evaluate", _eval, cfg)
        return StageResponse(stage="evaluate", result=result)

    @app.post("/audit-penetration", response_model=StageResponse)
    def audit(req: AuditRequest) -> StageResponse:
        cfg = _config(req, "audit-penetration")
        result = _run("audit-penetration", pipeline.run_audit, cfg, split=req.split)
        return StageResponse(stage="audit-penetration", result=result)

    @app.post("/plot-trace", response_model=StageResponse)
    def plot_trace(req: PlotTraceRequest) -> StageResponse:
        cfg = _config(req, "plot-trace")
        result = _run("plot-trace", pipeline.run_plot_trace, cfg, tag=req.tag)
        return StageResponse(stage="plot-trace", result=result)

    return app
