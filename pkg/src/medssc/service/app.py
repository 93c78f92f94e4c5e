"""FastAPI service exposing the pipeline stages.

Endpoints operate on work directories local to the server process;
requests carry the same dataset/seed/override surface as the CLI, which
is a thin client of this app (in-process by default, remote with
``--server``). Stage errors map to 409 (missing upstream artifacts) or
400 (bad configuration/input).
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..artifacts import ArtifactError
from ..config import ConfigError, PipelineConfig, build_config
from ..corpus import CorpusError
from ..features import FeatureError
from ..training import TrainingError
from . import schemas


def _config(request: schemas.ConfigRequest) -> PipelineConfig:
    overrides = dict(request.overrides)
    if request.seed is not None:
        overrides["seed"] = request.seed
    return build_config(
        dataset=request.dataset,
        work_dir=request.work_dir,
        config_file=request.config_file,
        overrides=overrides,
    )


def create_app() -> FastAPI:
    app = FastAPI(
        title="medssc",
        version=__version__,
        description="Sequential sentence classification pipeline for medical abstracts",
    )

    @app.exception_handler(pipeline.PipelineError)
    async def _pipeline_error(request, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(ArtifactError)
    async def _artifact_error(request, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(ConfigError)
    async def _config_error(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(CorpusError)
    async def _corpus_error(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FeatureError)
    async def _feature_error(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(TrainingError)
    async def _training_error(request, exc):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/prepare", response_model=schemas.PrepareResponse)
    def prepare(request: schemas.PrepareRequest):
        config = _config(request)
        config.data_dir = request.data_dir
        if request.word_vectors:
            config.word_vectors = request.word_vectors
        return pipeline.prepare(config, force=request.force)

    @app.post("/export-sentence-vectors", response_model=schemas.ExportVectorsResponse)
    def export_sentence_vectors(request: schemas.ExportVectorsRequest):
        config = _config(request)
        if request.encoder:
            config.encoder = request.encoder
        return pipeline.export_sentence_vectors(config, force=request.force)

    @app.post("/train/sen", response_model=schemas.TrainResponse)
    def train_sen(request: schemas.TrainRequest):
        config = _config(request)
        if request.epochs is not None:
            config.sen.epochs = request.epochs
        if request.branches is not None:
            config.sen.branches = tuple(request.branches)
        return pipeline.train_sen(config, force=request.force)

    @app.post("/extract-embeddings", response_model=schemas.ExtractResponse)
    def extract_embeddings(request: schemas.ConfigRequest):
        return pipeline.extract_embeddings(_config(request), force=request.force)

    @app.post("/train/abs", response_model=schemas.TrainResponse)
    def train_abs(request: schemas.TrainRequest):
        config = _config(request)
        if request.epochs is not None:
            config.abs.epochs = request.epochs
        return pipeline.train_abs(config, force=request.force)

    @app.post("/train/seg", response_model=schemas.TrainResponse)
    def train_seg(request: schemas.TrainRequest):
        config = _config(request)
        if request.epochs is not None:
            config.seg.epochs = request.epochs
        return pipeline.train_seg(config, force=request.force)

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(request: schemas.EvaluateRequest):
        config = _config(request)
        return pipeline.evaluate_level(
            config, level=request.level, split=request.split, force=request.force
        )

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(request: schemas.PredictRequest):
        config = _config(request)
        return pipeline.predict(
            config, level=request.level, split=request.split, force=request.force
        )

    return app


app = create_app()
