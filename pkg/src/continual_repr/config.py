from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .datasets import get_dataset_info
from .errors import ConfigFileError, UnknownDatasetError
from .models import TaskSequence
from .task_stream import SequenceSpec, build_sequence, parse_sequence_spec
from .utils import stable_hash

ObjectiveName = Literal["sl", "sl_mlp", "trex", "supcon", "barlow", "simclr"]
StrategyName = Literal["finetune", "lwf", "cassle", "pfr"]
Profile = Literal["full", "desk", "custom"]

CE_FAMILY: frozenset[str] = frozenset({"sl", "sl_mlp", "trex"})
TWO_VIEW: frozenset[str] = frozenset({"supcon", "barlow", "simclr"})
LABELED: frozenset[str] = frozenset({"sl", "sl_mlp", "trex", "supcon"})

# Which strategies each training objective may be paired with.
COMPATIBILITY: dict[str, frozenset[str]] = {
    "sl": frozenset({"finetune", "lwf", "pfr"}),
    "sl_mlp": frozenset({"finetune", "lwf", "pfr"}),
    "trex": frozenset({"finetune", "lwf", "pfr"}),
    "supcon": frozenset({"finetune", "cassle", "pfr"}),
    "barlow": frozenset({"finetune", "cassle", "pfr"}),
    "simclr": frozenset({"finetune", "cassle", "pfr"}),
}

_DEFAULT_TEMPERATURE = {"trex": 0.1, "simclr": 0.1, "supcon": 0.07}
_DEFAULT_PENALTY = {"finetune": 0.0, "lwf": 1.0, "cassle": 1.0, "pfr": 1.0}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderConfig(_Strict):
    backbone_name: Literal["resnet18"] = "resnet18"
    feature_dim: int = 512
    small_input_stem: bool = True
    image_size: int | None = Field(default=None, description="Enforced input resolution")

    @model_validator(mode="after")
    def _dims(self) -> EncoderConfig:
        if self.backbone_name == "resnet18" and self.feature_dim != 512:
            raise ValueError("resnet18 produces 512-dimensional features")
        return self


class ProjectorConfig(_Strict):
    enabled: bool = True
    depth: int = 3
    hidden_dim: int = 2048
    output_dim: int = 2048
    batch_norm: bool = True
    output_l2_normalize: bool = False

    @model_validator(mode="after")
    def _depth(self) -> ProjectorConfig:
        if self.enabled and self.depth < 1:
            raise ValueError("projector depth must be >= 1 when enabled")
        return self


class HeadConfig(_Strict):
    kind: Literal["linear", "cosine"] = "linear"
    input: Literal["backbone", "projector"] = "backbone"
    temperature: float = Field(default=0.1, gt=0)


class ObjectiveConfig(_Strict):
    name: ObjectiveName
    temperature: float = Field(default=0.0, ge=0)
    barlow_lambda: float = Field(default=0.005, gt=0)
    requires_two_views: bool | None = None
    requires_labels: bool | None = None

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if isinstance(data, str):
            data = {"name": data}
        if isinstance(data, dict) and "name" in data:
            data = dict(data)
            name = data["name"]
            if data.get("temperature") is None:
                data["temperature"] = _DEFAULT_TEMPERATURE.get(name, 1.0)
            if data.get("requires_two_views") is None:
                data["requires_two_views"] = name in TWO_VIEW
            if data.get("requires_labels") is None:
                data["requires_labels"] = name in LABELED
        return data

    @model_validator(mode="after")
    def _consistent(self) -> ObjectiveConfig:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.name in TWO_VIEW and not self.requires_two_views:
            raise ValueError(f"{self.name} requires two views")
        if self.name in LABELED and not self.requires_labels:
            raise ValueError(f"{self.name} requires labels")
        return self

    @property
    def ce_family(self) -> bool:
        return self.name in CE_FAMILY


class StrategyConfig(_Strict):
    name: StrategyName = "finetune"
    penalty_weight: float | None = Field(default=None, ge=0)
    distill_temperature: float = Field(default=2.0, gt=0)
    predictor_depth: int = Field(default=2, ge=1)
    predictor_hidden_dim: int = Field(default=2048, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if isinstance(data, str):
            data = {"name": data}
        if isinstance(data, dict):
            data = dict(data)
            if data.get("penalty_weight") is None:
                data["penalty_weight"] = _DEFAULT_PENALTY.get(data.get("name", "finetune"), 0.0)
        return data

    @property
    def weight(self) -> float:
        # finetune ignores any configured weight
        return 0.0 if self.name == "finetune" else float(self.penalty_weight or 0.0)


class TrainLoopConfig(_Strict):
    epochs_first_task: int = Field(ge=0)
    epochs_per_task: int = Field(ge=0)
    optimizer: Literal["sgd", "adamw"] = "sgd"
    lr: float = Field(ge=0)
    momentum: float = Field(default=0.9, ge=0)
    weight_decay: float = Field(default=5e-4, ge=0)
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    batch_size: int = Field(default=256, gt=0)
    max_train_per_class: int | None = Field(default=None, gt=0)
    num_workers: int = Field(default=0, ge=0)
    seed: int = 0

    def epochs_for(self, task_id: int) -> int:
        return self.epochs_first_task if task_id == 0 else self.epochs_per_task


class LoopOverrides(_Strict):
    epochs_first_task: int | None = Field(default=None, ge=0)
    epochs_per_task: int | None = Field(default=None, ge=0)
    optimizer: Literal["sgd", "adamw"] | None = None
    lr: float | None = Field(default=None, gt=0)
    momentum: float | None = Field(default=None, ge=0)
    weight_decay: float | None = Field(default=None, ge=0)
    lr_schedule: Literal["cosine", "constant"] | None = None
    batch_size: int | None = Field(default=None, gt=0)
    max_train_per_class: int | None = Field(default=None, gt=0)
    num_workers: int | None = Field(default=None, ge=0)


PROFILES: dict[str, dict[str, Any]] = {
    "full": {"epochs_first_task": 200, "epochs_per_task": 100, "batch_size": 256},
    "desk": {
        "epochs_first_task": 30,
        "epochs_per_task": 20,
        "batch_size": 128,
        "max_train_per_class": 200,
    },
    "custom": {},
}

DESK_REFERENCE_PER_CLASS = 500


class EvalOptions(_Strict):
    k: int = Field(default=20, gt=0)
    knn_temperature: float = Field(default=0.07, gt=0)
    cka_probe: str | None = Field(
        default=None, description="Dataset for CKA; first task's by default"
    )
    cka_max_samples: int = Field(default=10_000, gt=1)
    spectra_split: Literal["train", "test"] = "test"
    eval_batch_size: int = Field(default=512, gt=0)
    max_reference_per_class: int | None = Field(default=None, gt=0)
    dump_embeddings: bool = True
    dump_splits: tuple[Literal["train", "test"], ...] = ("test",)


def default_projector(objective: str) -> ProjectorConfig:
    if objective == "sl":
        return ProjectorConfig(enabled=False)
    return ProjectorConfig(output_l2_normalize=objective in {"trex", "supcon", "simclr"})


def default_head(objective: str, temperature: float) -> HeadConfig | None:
    if objective == "sl":
        return HeadConfig(kind="linear", input="backbone")
    if objective == "sl_mlp":
        return HeadConfig(kind="linear", input="projector")
    if objective == "trex":
        return HeadConfig(kind="cosine", input="projector", temperature=temperature)
    return None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.\-]+$")
    sequence: str
    class_order_seed: int = 0
    objective: ObjectiveConfig
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    profile: Profile = "desk"
    loop: LoopOverrides = Field(default_factory=LoopOverrides)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: str = "runs"
    dataset_root: str | None = None
    download: bool = False
    device: str = "auto"
    workers: int = Field(default=1, ge=1)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    projector: ProjectorConfig | None = None
    head: HeadConfig | None = None
    eval: EvalOptions = Field(default_factory=EvalOptions)

    @model_validator(mode="after")
    def _validate(self) -> ExperimentConfig:
        try:
            spec = parse_sequence_spec(self.sequence)
        except UnknownDatasetError as e:
            raise ValueError(str(e)) from e

        obj, strat = self.objective.name, self.strategy.name
        if strat not in COMPATIBILITY[obj]:
            allowed = ", ".join(sorted(COMPATIBILITY[obj]))
            reason = ""
            if strat == "lwf":
                reason = " (LwF distills logits, so it needs a CE-family objective)"
            raise ValueError(
                f"strategy {strat!r} cannot be paired with {obj!r}{reason}; allowed: {allowed}"
            )

        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")

        sizes = {get_dataset_info(n).image_size for n in spec.datasets}
        if len(sizes) != 1:
            raise ValueError(f"datasets in {self.sequence!r} differ in resolution: {sorted(sizes)}")

        if self.projector is None:
            self.projector = default_projector(obj)
        if self.head is None:
            self.head = default_head(obj, self.objective.temperature)

        needs_projector = obj != "sl" or strat == "cassle"
        if needs_projector and not self.projector.enabled:
            raise ValueError(f"{obj}/{strat} needs an enabled projector")
        if obj in {"trex", "supcon", "simclr"} and not self.projector.output_l2_normalize:
            raise ValueError(f"{obj} requires output_l2_normalize on the projector")
        if self.objective.ce_family and self.head is None:
            raise ValueError(f"{obj} needs a classification head")
        if self.head is not None and self.head.input == "projector" and not self.projector.enabled:
            raise ValueError("head reads the projector output but the projector is disabled")

        if self.profile == "custom" and (
            self.loop.epochs_first_task is None or self.loop.epochs_per_task is None
        ):
            raise ValueError(
                "profile 'custom' needs loop.epochs_first_task and loop.epochs_per_task"
            )
        if self.eval.cka_probe is not None and self.eval.cka_probe not in spec.datasets:
            raise ValueError(f"cka_probe {self.eval.cka_probe!r} is not part of {self.sequence!r}")
        return self

    def sequence_spec(self) -> SequenceSpec:
        return parse_sequence_spec(self.sequence)

    def build_sequence(self) -> TaskSequence:
        return build_sequence(self.sequence, seed=self.class_order_seed)

    def image_size(self) -> int:
        return get_dataset_info(self.sequence_spec().datasets[0]).image_size

    def resolved_encoder(self) -> EncoderConfig:
        if self.encoder.image_size is not None:
            return self.encoder
        return self.encoder.model_copy(update={"image_size": self.image_size()})

    def resolved_loop(self, seed: int) -> TrainLoopConfig:
        values: dict[str, Any] = dict(PROFILES[self.profile])
        values.update(self.loop.model_dump(exclude_none=True))
        if "lr" not in values:
            base = 0.1 if self.objective.ce_family else 0.3
            batch = values.get("batch_size", 256)
            values["lr"] = base if self.objective.ce_family else base * batch / 256
        values["seed"] = seed
        return TrainLoopConfig(**values)

    def resolved_eval(self) -> EvalOptions:
        if self.profile == "desk" and self.eval.max_reference_per_class is None:
            update = {"max_reference_per_class": DESK_REFERENCE_PER_CLASS}
            return self.eval.model_copy(update=update)
        return self.eval

    def cka_probe(self) -> str:
        return self.eval.cka_probe or self.sequence_spec().datasets[0]

    def run_id(self, seed: int) -> str:
        return f"{self.name}-seed{seed}"

    def training_hash(self) -> str:
        """Identity of everything that shapes checkpoints (not seeds, paths or eval options)."""
        payload = self.model_dump(
            mode="json",
            include={
                "sequence",
                "class_order_seed",
                "objective",
                "strategy",
                "profile",
                "loop",
                "encoder",
                "projector",
                "head",
            },
        )
        return stable_hash(payload)

    def config_hash(self) -> str:
        payload = self.model_dump(
            mode="json", exclude={"output_dir", "dataset_root", "download", "device", "workers"}
        )
        return stable_hash(payload)


def _deep_merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigFileError(f"Config not found: {path}")
    try:
        text = p.read_text(encoding="utf-8")
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except Exception as e:  # noqa: BLE001
        raise ConfigFileError(f"Failed to parse config: {path}") from e
    if not isinstance(data, dict):
        raise ConfigFileError(f"Config must be a mapping: {path}")
    return data


def parse_config(
    path: str | Path | None = None,
    *,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Load, merge and validate an experiment config.

    Raises pydantic.ValidationError (field-level) on invalid content and ConfigFileError on
    unreadable files.
    """
    data: dict[str, Any] = load_config_file(path) if path is not None else {}
    if overrides:
        data = _deep_merge(data, overrides)
    return ExperimentConfig.model_validate(data)


def dump_config(config: ExperimentConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text
