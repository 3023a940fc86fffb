from __future__ import annotations

import math
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Split = Literal["train", "test"]
SequenceKind = Literal["class-incremental", "dataset-shift"]


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: int = Field(ge=0)
    dataset_name: str
    class_ids: tuple[int, ...] = Field(description="Sorted global class labels")
    split: Split = "train"
    label_offset: int = Field(default=0, ge=0, description="Global label of the dataset's class 0")

    @field_validator("class_ids")
    @classmethod
    def _strictly_increasing(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v:
            raise ValueError("class_ids must be non-empty")
        if any(b <= a for a, b in zip(v, v[1:], strict=False)):
            raise ValueError("class_ids must be strictly increasing")
        return v

    def local_class_ids(self) -> list[int]:
        return [c - self.label_offset for c in self.class_ids]


class TaskSequence(BaseModel):
    model_config = ConfigDict(frozen=True)

    tasks: tuple[TaskSpec, ...]
    kind: SequenceKind
    notation: str = ""

    @model_validator(mode="after")
    def _check_layout(self) -> TaskSequence:
        if not self.tasks:
            raise ValueError("a sequence needs at least one task")
        if [t.task_id for t in self.tasks] != list(range(len(self.tasks))):
            raise ValueError("task ids must be 0..n-1 in order")
        if self.kind == "class-incremental":
            if len({t.dataset_name for t in self.tasks}) != 1:
                raise ValueError("class-incremental tasks must come from one dataset")
            if len({len(t.class_ids) for t in self.tasks}) != 1:
                raise ValueError("class-incremental tasks must have equal cardinality")
            seen: set[int] = set()
            for t in self.tasks:
                if seen & set(t.class_ids):
                    raise ValueError(f"task {t.task_id} overlaps earlier tasks")
                seen |= set(t.class_ids)
        return self

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def datasets(self) -> list[str]:
        """Distinct dataset names in order of first appearance."""
        out: list[str] = []
        for t in self.tasks:
            if t.dataset_name not in out:
                out.append(t.dataset_name)
        return out

    def label_offsets(self) -> dict[str, int]:
        return {t.dataset_name: t.label_offset for t in self.tasks}

    def all_class_ids(self) -> list[int]:
        return sorted({c for t in self.tasks for c in t.class_ids})

    def for_split(self, split: Split) -> TaskSequence:
        return self.model_copy(
            update={"tasks": tuple(t.model_copy(update={"split": split}) for t in self.tasks)}
        )


class AugmentationPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    view_count: Literal[1, 2] = 1
    image_size: int = Field(default=32, gt=0)
    crop: Literal["resized", "padded", "none"] = "padded"
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_padding: int = 4
    flip_p: float = Field(default=0.5, ge=0.0, le=1.0)
    color_jitter: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    color_jitter_p: float = Field(default=0.0, ge=0.0, le=1.0)
    grayscale_p: float = Field(default=0.0, ge=0.0, le=1.0)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


class EmbeddingSource(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    boundary: int
    split: Split
    dataset: str = "sequence"


class SpectrumRecord(BaseModel):
    eigenvalues: list[float] = Field(description="Covariance eigenvalues, descending, clamped at 0")
    cumulative: list[float] = Field(description="Cumulative explained-variance ratios")
    var95_index: int

    @property
    def total_variance(self) -> float:
        return float(sum(self.eigenvalues))

    def normalized_log_spectrum(self, floor: float = 1e-12) -> list[float]:
        """log10 of eigenvalues divided by the largest one, floored to stay finite."""
        top = max(self.eigenvalues[0], floor) if self.eigenvalues else floor
        return [math.log10(max(v / top, floor)) for v in self.eigenvalues]


class MetricRecord(BaseModel):
    metric: str
    value: float
    seed: int | None = None
    boundary: int | None = None
    task_id: int | None = None
    probe: str = "sequence"
    inputs: dict[str, float] = Field(default_factory=dict)


class AggregateRecord(BaseModel):
    metric: str
    boundary: int | None = None
    task_id: int | None = None
    probe: str = "sequence"
    mean: float
    std: float
    n: int
    values: list[float] = Field(default_factory=list)


class SpectrumEntry(BaseModel):
    seed: int | None = None
    boundary: int
    probe: str
    split: Split
    spectrum: SpectrumRecord


class MetricReport(BaseModel):
    experiment: str
    sequence: str
    objective: str
    strategy: str
    n_tasks: int
    config_hash: str
    seeds: list[int] = Field(default_factory=list)
    records: list[MetricRecord] = Field(default_factory=list)
    spectra: list[SpectrumEntry] = Field(default_factory=list)
    aggregates: list[AggregateRecord] = Field(default_factory=list)
    flags: list[str] = Field(default_factory=list)

    def select(
        self,
        metric: str,
        *,
        seed: int | None = None,
        boundary: int | None = None,
        task_id: int | None = None,
    ) -> list[MetricRecord]:
        out = [r for r in self.records if r.metric == metric]
        if seed is not None:
            out = [r for r in out if r.seed == seed]
        if boundary is not None:
            out = [r for r in out if r.boundary == boundary]
        if task_id is not None:
            out = [r for r in out if r.task_id == task_id]
        return out

    def aggregate(
        self, metric: str, *, boundary: int | None = None, task_id: int | None = None
    ) -> AggregateRecord | None:
        for a in self.aggregates:
            if a.metric == metric and a.boundary == boundary and a.task_id == task_id:
                return a
        return None


class TrainLogRecord(BaseModel):
    step: int
    epoch: int
    task: int
    base_loss: float
    penalty: float
    total: float
    lr: float


BoundaryStatus = Literal["missing", "trained", "evaluated", "stale"]


class BoundaryState(BaseModel):
    task_id: int
    status: BoundaryStatus
    checkpoint: str | None = None
    eval_record: str | None = None
    reasons: list[str] = Field(default_factory=list)


class ResumePlan(BaseModel):
    run_id: str
    boundaries: list[BoundaryState]
    tasks_to_train: list[int]
    tasks_to_evaluate: list[int]


SeedRunStatus = Literal["pending", "running", "completed", "failed"]


class SeedRunEntry(BaseModel):
    run_id: str
    seed: int
    status: SeedRunStatus = "pending"
    checkpoints: list[str] = Field(default_factory=list)
    embedding_dumps: list[str] = Field(default_factory=list)
    train_log: str | None = None
    report_path: str | None = None
    wall_clock_s: dict[str, float] = Field(default_factory=dict)
    error: str | None = None


class RunManifest(BaseModel):
    experiment: str
    status: Literal["running", "completed", "failed"] = "running"
    code_version: str
    config: dict[str, Any]
    config_hash: str
    runs: list[SeedRunEntry] = Field(default_factory=list)
    report_path: str | None = None
    digests: dict[str, str] = Field(default_factory=dict)
    error: str | None = None

    def artifact_paths(self) -> list[str]:
        paths: list[str] = []
        for r in self.runs:
            paths.extend(r.checkpoints)
            paths.extend(r.embedding_dumps)
            if r.train_log:
                paths.append(r.train_log)
            if r.report_path:
                paths.append(r.report_path)
        if self.report_path:
            paths.append(self.report_path)
        return paths


ComparisonRelation = Literal["exclusion", "transfer", "none"]


class ComparisonReport(BaseModel):
    run: str
    reference: str
    relation: ComparisonRelation
    probe: str
    records: list[MetricRecord] = Field(default_factory=list)
    aggregates: list[AggregateRecord] = Field(default_factory=list)


class BoundaryEvaluation(BaseModel):
    task_id: int
    config_hash: str
    records: list[MetricRecord] = Field(default_factory=list)
    spectra: list[SpectrumEntry] = Field(default_factory=list)
    embedding_dumps: list[str] = Field(default_factory=list)
    flags: list[str] = Field(default_factory=list)
