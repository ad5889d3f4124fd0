"""Request/response models for the decoding service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class SynthRequest(BaseModel):
    out: str
    subjects: int = Field(default=8, ge=1)
    trials_per_class: int = Field(default=10, ge=1)
    channels: int = Field(default=10, ge=1)
    samples: int = Field(default=1500, ge=1)
    sample_rate: float = Field(default=1000.0, gt=0)
    noise_exponent: float = 1.0
    signature_snr: float = Field(default=1.0, ge=0)
    seed: int = 0
    manifest: str | None = None


class SynthResponse(BaseModel):
    out: str
    n_trials: int
    n_subjects: int
    payload_sha256: str
    manifest_line: str | None = None


class PreprocessRequest(BaseModel):
    input: str
    out: str
    config_file: str | None = None
    # explicit values override the config file, which overrides defaults
    filter_order: int | None = Field(default=None, ge=1)
    low_hz: float | None = None
    high_hz: float | None = None
    trial_seconds: float | None = None
    baseline_seconds: float | None = None
    channels: list[str] | None = None
    zero_phase: bool | None = None


class PreprocessResponse(BaseModel):
    out: str
    n_trials: int
    n_channels: int
    n_samples: int
    payload_sha256: str


class ModelSettings(BaseModel):
    blocks: int = Field(default=5, ge=1)
    features: int = Field(default=64, ge=1)
    kernel: int = Field(default=11, ge=1)
    pool_kernel: int = Field(default=2, ge=1)
    pool_stride: int = Field(default=2, ge=1)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    hidden: int = Field(default=128, ge=1)
    classes: int = Field(default=13, ge=2)
    skip: bool = True
    skip_blocks: list[int] | None = None


class TrainSettings(ModelSettings):
    folds: int = Field(default=5, ge=2)
    grouping: Literal["subject", "trial"] = "subject"
    seed: int = 0
    batch_size: int = Field(default=128, ge=1)
    max_epochs: int = Field(default=2000, ge=1)
    validate_every: int = Field(default=10, ge=1)
    patience: int = Field(default=10, ge=1)
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    lr: float = Field(default=1e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    jobs: int = Field(default=1, ge=1)


class TrainRequest(TrainSettings):
    data: str
    out_dir: str


class MetricsSummary(BaseModel):
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


class FoldSummary(BaseModel):
    fold: int
    accuracy: float
    best_val_accuracy: float | None
    checkpoint: str
    history_csv: str


class TrainResponse(BaseModel):
    out_dir: str
    metrics_csv: str
    pooled: MetricsSummary
    folds: list[FoldSummary]


class EvalRequest(BaseModel):
    data: str
    checkpoint: str
    out: str | None = None


class EvalResponse(BaseModel):
    metrics_csv: str | None
    summary: MetricsSummary
    n_trials: int


class AblateRequest(TrainSettings):
    data: str
    out: str
    seeds: list[int] = Field(min_length=2)


class AblationPairOut(BaseModel):
    seed: int
    skip_accuracy: float
    noskip_accuracy: float


class AblateResponse(BaseModel):
    out: str
    pairs: list[AblationPairOut]
    mean_difference: float


class ReportRequest(BaseModel):
    metrics: str
    percent: bool = False


class ReportResponse(BaseModel):
    text: str
