from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


LossName = Literal[
    "ccl",
    "nsoftmax",
    "proxynca",
    "cross_entropy",
    "center_loss",
    "margin_contrastive",
    "infonce-batch",
]
CenterModeName = Literal["gradient", "stopgrad", "momentum"]

MARGIN_LOSSES = {"ccl", "margin_contrastive"}
CENTER_WEIGHT_LOSSES = {"ccl", "center_loss"}
SMOOTHING_LOSSES = {"ccl"}
CENTER_BANK_LOSSES = {"ccl", "nsoftmax", "proxynca", "margin_contrastive"}
DEFAULT_LABEL_SMOOTHING = 0.1


class MarginConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    s: float = Field(default=16.0, gt=0)
    m: float = Field(default=0.0, ge=0.0, lt=1.0)
    lambda_: float = Field(default=0.0, ge=0.0, alias="lambda")
    epsilon: float = Field(default=0.0, ge=0.0, lt=1.0)


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["symmetric", "longtail"] = "symmetric"
    rate: float = Field(ge=0.0, le=1.0)
    seed: int = 0
    longtail_subclusters: int = Field(default=4, ge=1)


class DatasetSpec(BaseModel):
    kind: Literal["sphere", "idx"] = "sphere"
    num_classes: int = Field(default=10, ge=1)
    test_classes: int = Field(default=10, ge=0)
    dim: int = Field(default=32, ge=2)
    samples_per_class: int = Field(default=50, ge=1)
    spread: float = Field(default=0.4, gt=0)
    seed: int | None = None
    images_path: str | None = None
    labels_path: str | None = None
    max_records: int | None = Field(default=None, ge=2)
    holdout_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    query_fraction: float | None = Field(default=None, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _idx_needs_paths(self) -> "DatasetSpec":
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx datasets need both images_path and labels_path")
        return self


class EncoderSpec(BaseModel):
    layer_dims: list[int] = Field(default_factory=lambda: [32, 64, 16], min_length=2)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _positive_widths(self) -> "EncoderSpec":
        if any(width < 1 for width in self.layer_dims):
            raise ValueError("every layer width must be >= 1")
        return self


class OptimizerSpec(BaseModel):
    kind: Literal["sgd_nesterov", "adamw"] = "sgd_nesterov"
    learning_rate: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float | None = Field(default=None, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0)

    @property
    def resolved_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.0005 if self.kind == "sgd_nesterov" else 0.01


class TrainConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    loss: LossName = "ccl"
    s: float = Field(default=16.0, gt=0)
    m: float = Field(default=0.0, ge=0.0, lt=1.0)
    lambda_: float = Field(default=0.0, ge=0.0, alias="lambda")
    epsilon: float | None = Field(default=None, ge=0.0, lt=1.0)
    center_mode: CenterModeName = "gradient"
    mu: float | None = Field(default=None, ge=0.0, le=1.0)
    renormalize_centers: bool = False
    center_lr: float | None = Field(default=None, ge=0.0)
    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=50, ge=0)
    seed: int = 0
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    noise: NoiseSpec | None = None
    eval_ks: list[int] = Field(default_factory=lambda: [1, 2, 4], min_length=1)

    @model_validator(mode="after")
    def _cross_field_rules(self) -> "TrainConfig":
        if self.m != 0.0 and self.loss not in MARGIN_LOSSES:
            raise ValueError(f"m is only valid for margin-capable losses {sorted(MARGIN_LOSSES)}, not {self.loss}")
        if self.lambda_ != 0.0 and self.loss not in CENTER_WEIGHT_LOSSES:
            raise ValueError(f"lambda is only valid for {sorted(CENTER_WEIGHT_LOSSES)}, not {self.loss}")
        if self.epsilon and self.loss not in SMOOTHING_LOSSES:
            raise ValueError(f"label smoothing epsilon is only supported by {sorted(SMOOTHING_LOSSES)}")
        if self.center_mode == "momentum" and self.mu is None:
            raise ValueError("mu is required when center_mode is momentum")
        if self.center_mode != "momentum" and self.mu is not None:
            raise ValueError("mu is only valid with center_mode momentum")
        if self.center_mode != "gradient" and self.loss not in CENTER_BANK_LOSSES:
            raise ValueError(f"center_mode {self.center_mode} needs a center-bank loss {sorted(CENTER_BANK_LOSSES)}")
        if self.eval_ks != sorted(self.eval_ks) or any(k < 1 for k in self.eval_ks):
            raise ValueError("eval_ks must be positive and sorted ascending")
        if self.dataset.kind == "sphere" and self.encoder.layer_dims[0] != self.dataset.dim:
            raise ValueError(
                f"encoder input width {self.encoder.layer_dims[0]} does not match dataset dim {self.dataset.dim}"
            )
        return self

    @property
    def resolved_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return DEFAULT_LABEL_SMOOTHING if self.loss in SMOOTHING_LOSSES else 0.0

    @property
    def margin_config(self) -> MarginConfig:
        return MarginConfig(s=self.s, m=self.m, lambda_=self.lambda_, epsilon=self.resolved_epsilon)

    @property
    def dataset_seed(self) -> int:
        return self.dataset.seed if self.dataset.seed is not None else self.seed

    def echo(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


class GeometryReport(BaseModel):
    per_class_mean_cosine: dict[int, float] = Field(default_factory=dict)
    global_mean_intra_class_cosine: float = Field(ge=-1.0, le=1.0)
    min_center_cosine_distance: float | None = Field(default=None, ge=0.0, le=2.0)
    radius_mean: float = Field(ge=0.0)
    radius_std: float = Field(ge=0.0)


class EpochRecord(BaseModel):
    epoch: int = Field(ge=1)
    loss: float
    recall: dict[int, float] = Field(default_factory=dict)


class RunReport(BaseModel):
    run_id: str
    version: str
    config: dict
    initial_recall: dict[int, float] = Field(default_factory=dict)
    epochs: list[EpochRecord] = Field(default_factory=list)
    final_recall: dict[int, float] = Field(default_factory=dict)
    geometry: GeometryReport | None = None
    wall_clock_seconds: float = Field(default=0.0, ge=0.0)


class RunSummary(BaseModel):
    run_id: str
    loss: str
    epochs: int = Field(ge=0)
    recall_at_1: float | None = None


class GradcheckRow(BaseModel):
    loss: str
    trial: int = Field(ge=0)
    group: str
    relative_error: float = Field(ge=0.0)
    passed: bool
    redraws: int = Field(default=0, ge=0)


class GradcheckRequest(BaseModel):
    seed: int = 0
    trials: int = Field(default=20, ge=1, le=200)


class GradcheckResponse(BaseModel):
    all_passed: bool
    tolerance: float
    rows: list[GradcheckRow] = Field(default_factory=list)


class SweepCell(BaseModel):
    lambda_: float = Field(alias="lambda")
    m: float
    recall_at_1: float
    run_id: str

    model_config = ConfigDict(populate_by_name=True)


class NoiseStudyRow(BaseModel):
    loss: str
    kind: Literal["clean", "symmetric", "longtail"]
    rate: float = Field(ge=0.0, le=1.0)
    recall_at_1: float
    run_id: str


class StudyRow(BaseModel):
    setting: str
    value: str
    recall_at_1: float
    run_id: str


class RecallRequest(BaseModel):
    queries: list[list[float]] = Field(min_length=1)
    query_labels: list[int]
    gallery: list[list[float]] | None = None
    gallery_labels: list[int] | None = None
    ks: list[int] = Field(default_factory=lambda: [1, 2, 4], min_length=1)


class RecallResponse(BaseModel):
    exclude_self: bool
    recall: dict[int, float]


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str
    runs_dir: str
    runs_count: int = Field(ge=0)
