"""Request and response models for the pipeline service."""

from pydantic import BaseModel, Field


class StageRequest(BaseModel):
    """Common request base: optional config file plus inline overrides.

    Overrides use the same nested shape as the config file and win over it.
    """

    config_path: str | None = None
    overrides: dict = Field(default_factory=dict)


class GenerateRequest(StageRequest):
    pass


class TrainPriorRequest(StageRequest):
    pass


class TrainDiffusionRequest(StageRequest):
    pass


class ReconstructRequest(StageRequest):
    split: str = "test"
    tag: str = "adapted"
    steps: int | None = None
    physics: bool = True
    single_branch: bool = False
    use_prior: bool = True


class EvaluateRequest(StageRequest):
    tag: str = "adapted"
    split: str = "test"


class AuditRequest(StageRequest):
    split: str | None = None


class PlotTraceRequest(StageRequest):
    tag: str = "adapted"


class StageResponse(BaseModel):
    ok: bool = True
    stage: str
    result: dict = Field(default_factory=dict)


class ErrorBody(BaseModel):
    """Carried in the HTTP error detail."""

    stage: str
    kind: str
    message: str
