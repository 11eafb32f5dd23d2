"""HTTP service exposing the pipeline stages.

Each endpoint runs one stage synchronously against a run directory on the
server's filesystem and returns the artifact paths with their sha256 hashes.
All state lives in the run directory, so the service itself is stateless and
the CLI can drive it either in-process or over the network.
"""

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict

from . import pipeline
from .config import PipelineConfig, load_config

app = FastAPI(title="amalgam", version="0.1.0")


class StageRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_dir: str
    config: PipelineConfig | None = None
    config_path: str | None = None
    seed: int | None = None
    tasks: str | None = None
    teacher: int | None = None


class StageResponse(BaseModel):
    stage: str
    out_dir: str
    artifacts: dict[str, str]


class HealthResponse(BaseModel):
    status: str


def resolve_config(request: StageRequest) -> PipelineConfig:
    if request.config is not None and request.config_path is not None:
        raise HTTPException(400, "give either an inline config or config_path, not both")
    if request.config is not None:
        config = request.config
    elif request.config_path is not None:
        try:
            config = load_config(request.config_path)
        except FileNotFoundError:
            raise HTTPException(400, f"config file not found: {request.config_path}") from None
        except ValueError as exc:
            raise HTTPException(400, f"invalid config: {exc}") from None
    else:
        config = PipelineConfig()
    overrides = {}
    if request.seed is not None:
        overrides["seed"] = request.seed
    if request.tasks is not None:
        overrides["amalgam"] = config.amalgam.model_copy(update={"tasks": request.tasks})
    return config.model_copy(update=overrides) if overrides else config


def _run(stage_fn, request: StageRequest, **kwargs) -> StageResponse:
    config = resolve_config(request)
    try:
        result = stage_fn(config, request.run_dir, **kwargs)
    except pipeline.MissingArtifactError as exc:
        raise HTTPException(409, str(exc)) from exc
    except pipeline.SpecHashMismatchError as exc:
        raise HTTPException(409, str(exc)) from exc
    except (ValueError, KeyError) as exc:
        raise HTTPException(400, str(exc)) from exc
    return StageResponse(stage=result.stage, out_dir=result.out_dir, artifacts=result.artifacts)


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok")


@app.post("/data/generate", response_model=StageResponse)
def generate_data(request: StageRequest) -> StageResponse:
    return _run(pipeline.run_gen_data, request)


@app.post("/teachers/pretrain", response_model=StageResponse)
def pretrain(request: StageRequest) -> StageResponse:
    if request.teacher is None:
        raise HTTPException(400, "pretrain requires a teacher index")
    return _run(pipeline.run_pretrain, request, teacher_index=request.teacher)


@app.post("/amalgamate", response_model=StageResponse)
def amalgamate(request: StageRequest) -> StageResponse:
    return _run(pipeline.run_amalgamate, request)


@app.post("/branchout", response_model=StageResponse)
def branchout(request: StageRequest) -> StageResponse:
    return _run(pipeline.run_branchout, request)


@app.post("/finetune", response_model=StageResponse)
def finetune(request: StageRequest) -> StageResponse:
    return _run(pipeline.run_finetune, request)


@app.post("/eval", response_model=StageResponse)
def evaluate(request: StageRequest) -> StageResponse:
    return _run(pipeline.run_eval, request)


@app.post("/run-all", response_model=list[StageResponse])
def run_all(request: StageRequest) -> list[StageResponse]:
    config = resolve_config(request)
    responses = []
    try:
        for result in pipeline.run_all(config, request.run_dir):
            responses.append(
                StageResponse(stage=result.stage, out_dir=result.out_dir, artifacts=result.artifacts)
            )
    except (pipeline.MissingArtifactError, pipeline.SpecHashMismatchError) as exc:
        raise HTTPException(409, str(exc)) from exc
    except (ValueError, KeyError) as exc:
        raise HTTPException(400, str(exc)) from exc
    return responses
