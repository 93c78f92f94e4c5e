"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

Dataset = Literal["pubmed20k", "pubmed200k", "nicta"]
Level = Literal["sen", "abs", "seg", "combine"]


class ConfigRequest(BaseModel):
    """Common configuration surface shared by every stage request."""

    dataset: Dataset = "pubmed20k"
    work_dir: str
    seed: int | None = None
    config_file: str | None = None
    overrides: dict = Field(default_factory=dict)
    force: bool = False


class PrepareRequest(ConfigRequest):
    data_dir: str
    word_vectors: str | None = None


class ExportVectorsRequest(ConfigRequest):
    encoder: str | None = None  # 'hash' or 'hf:<model-or-path>'


class TrainRequest(ConfigRequest):
    epochs: int | None = None
    branches: list[str] | None = None  # sentence model only


class EvaluateRequest(ConfigRequest):
    level: Level = "combine"
    split: str = "test"


class PredictRequest(ConfigRequest):
    level: Level = "combine"
    split: str = "test"


class SplitCounts(BaseModel):
    abstracts: int
    sentences: int


class PrepareResponse(BaseModel):
    work_dir: str
    config_hash: str
    splits: dict[str, SplitCounts]
    word_vocab_size: int
    char_vocab_size: int
    pretrained_word_vectors: bool


class ExportVectorsResponse(BaseModel):
    cache: str
    sentences: int
    dim: int
    encoder_id: str
    warnings: list[str] = Field(default_factory=list)


class EpochStats(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float
    learning_rate: float


class TrainResponse(BaseModel):
    checkpoint: str
    history_file: str
    epochs: int
    best_epoch: int
    best_val_loss: float
    best_val_f1: float
    history: list[EpochStats]
    warnings: list[str] = Field(default_factory=list)


class ExtractResponse(BaseModel):
    files: dict[str, str]
    sentences: dict[str, int]
    dim: int
    warnings: list[str] = Field(default_factory=list)


class EvaluateResponse(BaseModel):
    level: str
    split: str
    report: dict
    report_text: str
    report_files: dict[str, str]
    prediction_file: str
    warnings: list[str] = Field(default_factory=list)


class PredictResponse(BaseModel):
    prediction_file: str
    level: str
    split: str
    abstracts: int
    sentences: int
    warnings: list[str] = Field(default_factory=list)


class HealthResponse(BaseModel):
    status: str
    version: str
