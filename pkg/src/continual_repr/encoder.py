from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from torch import nn
from torchvision.models import resnet18

from .config import EncoderConfig, HeadConfig, ProjectorConfig
from .errors import CheckpointError, ProjectorDisabledError, ShapeMismatchError, UnknownHeadError
from .utils import seeded

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def build_backbone(cfg: EncoderConfig) -> nn.Module:
    net = resnet18(weights=None)
    if cfg.small_input_stem:
        # 32x32 inputs: 3x3 stem, no max-pool
        net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    return net


def build_mlp(
    in_dim: int, hidden_dim: int, out_dim: int, depth: int, *, batch_norm: bool
) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(depth - 1):
        layers.append(nn.Linear(d, hidden_dim))
        if batch_norm:
            layers.append(nn.BatchNorm1d(hidden_dim))
        layers.append(nn.ReLU(inplace=True))
        d = hidden_dim
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class CosineHead(nn.Module):
    """Cosine classifier: logits are cos(feature, class weight) / temperature."""

    def __init__(self, in_dim: int, n_classes: int, temperature: float) -> None:
        super().__init__()
        self.temperature = temperature
        self.weight = nn.Parameter(torch.empty(n_classes, in_dim))
        nn.init.normal_(self.weight, std=0.01)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(x, dim=1) @ F.normalize(self.weight, dim=1).T / self.temperature


@dataclass(frozen=True)
class Encoded:
    features: torch.Tensor
    projected: torch.Tensor | None


class ContinualEncoder(nn.Module):
    """Backbone + optional projector + one head per task.

    Evaluation consumes `forward_features` only; projector and heads exist for training.
    """

    def __init__(
        self,
        encoder: EncoderConfig,
        projector: ProjectorConfig | None = None,
        head: HeadConfig | None = None,
    ) -> None:
        super().__init__()
        self.encoder_cfg = encoder
        self.projector_cfg = projector if projector is not None else ProjectorConfig(enabled=False)
        self.head_cfg = head
        self.backbone = build_backbone(encoder)
        self.projector: nn.Module | None = None
        if self.projector_cfg.enabled:
            p = self.projector_cfg
            self.projector = build_mlp(
                encoder.feature_dim, p.hidden_dim, p.output_dim, p.depth, batch_norm=p.batch_norm
            )
        self.heads = nn.ModuleDict()
        self.head_classes: dict[int, tuple[int, ...]] = {}

    @property
    def feature_dim(self) -> int:
        return self.encoder_cfg.feature_dim

    @property
    def head_input_dim(self) -> int:
        if self.head_cfg is not None and self.head_cfg.input == "projector":
            return self.projector_cfg.output_dim
        return self.encoder_cfg.feature_dim

    def _check_input(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeMismatchError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        size = self.encoder_cfg.image_size
        if size is not None and tuple(images.shape[2:]) != (size, size):
            raise ShapeMismatchError(
                f"expected {size}x{size} inputs, got {images.shape[2]}x{images.shape[3]}"
            )

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        self._check_input(images)
        return self.backbone(images)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if self.projector is None:
            raise ProjectorDisabledError("projector is disabled for this model")
        z = self.projector(features)
        if self.projector_cfg.output_l2_normalize:
            z = F.normalize(z, dim=1)
        return z

    def forward_projected(self, images: torch.Tensor) -> torch.Tensor:
        return self.project(self.forward_features(images))

    def encode(self, images: torch.Tensor) -> Encoded:
        f = self.forward_features(images)
        projected = self.project(f) if self.projector is not None else None
        return Encoded(features=f, projected=projected)

    def add_head(self, task_id: int, class_ids: tuple[int, ...], *, seed: int) -> nn.Module:
        if self.head_cfg is None:
            raise UnknownHeadError("this model has no head configuration")
        key = str(task_id)
        if key in self.heads:
            return self.heads[key]
        with seeded(seed):
            if self.head_cfg.kind == "cosine":
                head: nn.Module = CosineHead(
                    self.head_input_dim, len(class_ids), self.head_cfg.temperature
                )
            else:
                head = nn.Linear(self.head_input_dim, len(class_ids))
        device = next(self.backbone.parameters()).device
        self.heads[key] = head.to(device)
        self.head_classes[task_id] = tuple(class_ids)
        return head

    def head_input(self, encoded: Encoded) -> torch.Tensor:
        if self.head_cfg is not None and self.head_cfg.input == "projector":
            if encoded.projected is None:
                raise ProjectorDisabledError("head reads the projector but it is disabled")
            return encoded.projected
        return encoded.features

    def head_logits(self, task_id: int, encoded: Encoded) -> torch.Tensor:
        key = str(task_id)
        if key not in self.heads:
            raise UnknownHeadError(f"no head for task {task_id}")
        return self.heads[key](self.head_input(encoded))

    def forward_logits(self, images: torch.Tensor, task_id: int | None = None) -> torch.Tensor:
        """Logits of one task head, or of every head concatenated in task order."""
        if task_id is not None and str(task_id) not in self.heads:
            raise UnknownHeadError(f"no head for task {task_id}")
        if task_id is None and not self.heads:
            raise UnknownHeadError("model has no heads")
        encoded = self.encode(images)
        if task_id is not None:
            return self.head_logits(task_id, encoded)
        return torch.cat([self.head_logits(t, encoded) for t in sorted(self.head_classes)], dim=1)

    def local_targets(self, task_id: int, labels: torch.Tensor) -> torch.Tensor:
        """Map global labels to column indices of the task's head."""
        classes = torch.as_tensor(self.head_classes[task_id], device=labels.device)
        return torch.searchsorted(classes, labels)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_features(images)

    def snapshot(self) -> FrozenSnapshot:
        return FrozenSnapshot(self)


class FrozenSnapshot:
    """Immutable copy of a model taken at a task boundary. Safe to share across threads."""

    def __init__(self, model: ContinualEncoder, *, task_index: int | None = None) -> None:
        self._model = copy.deepcopy(model).eval()
        self._model.requires_grad_(False)
        self.task_index = task_index

    @property
    def model(self) -> ContinualEncoder:
        return self._model

    @property
    def head_classes(self) -> dict[int, tuple[int, ...]]:
        return dict(self._model.head_classes)

    @property
    def device(self) -> torch.device:
        return next(self._model.parameters()).device

    def to(self, device: torch.device) -> FrozenSnapshot:
        if device == self.device:
            return self
        clone = FrozenSnapshot(self._model, task_index=self.task_index)
        clone._model.to(device)
        return clone

    @torch.no_grad()
    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        return self._model.forward_features(images)

    @torch.no_grad()
    def forward_projected(self, images: torch.Tensor) -> torch.Tensor:
        return self._model.forward_projected(images)

    @torch.no_grad()
    def forward_logits(self, images: torch.Tensor, task_id: int | None = None) -> torch.Tensor:
        return self._model.forward_logits(images, task_id)

    @torch.no_grad()
    def encode(self, images: torch.Tensor) -> Encoded:
        return self._model.encode(images)

    @torch.no_grad()
    def head_logits(self, task_id: int, encoded: Encoded) -> torch.Tensor:
        return self._model.head_logits(task_id, encoded)

    def snapshot(self) -> FrozenSnapshot:
        return FrozenSnapshot(self._model, task_index=self.task_index)


def forward_features(
    state: ContinualEncoder | FrozenSnapshot, images: torch.Tensor
) -> torch.Tensor:
    return state.forward_features(images)


def forward_projected(
    state: ContinualEncoder | FrozenSnapshot, images: torch.Tensor
) -> torch.Tensor:
    return state.forward_projected(images)


def forward_logits(
    state: ContinualEncoder | FrozenSnapshot, images: torch.Tensor, task_id: int | None = None
) -> torch.Tensor:
    return state.forward_logits(images, task_id)


def snapshot(state: ContinualEncoder | FrozenSnapshot) -> FrozenSnapshot:
    return state.snapshot()


class CheckpointMeta(BaseModel):
    format_version: int = CHECKPOINT_FORMAT
    task_index: int
    seed: int
    config_hash: str
    head_classes: dict[int, list[int]] = Field(default_factory=dict)


def save_checkpoint(
    state: ContinualEncoder | FrozenSnapshot,
    path: str | Path,
    *,
    task_index: int,
    seed: int,
    config_hash: str,
) -> Path:
    model = state.model if isinstance(state, FrozenSnapshot) else state
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "task_index": task_index,
        "seed": seed,
        "config_hash": config_hash,
        "encoder": model.encoder_cfg.model_dump(mode="json"),
        "projector": model.projector_cfg.model_dump(mode="json"),
        "head": model.head_cfg.model_dump(mode="json") if model.head_cfg is not None else None,
        "head_classes": {int(t): list(c) for t, c in model.head_classes.items()},
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    # Write-then-rename so an interrupted save never leaves a truncated checkpoint.
    tmp = p.with_suffix(p.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, p)
    logger.info("checkpoint_saved", extra={"path": str(p), "task_index": task_index})
    return p


def _read_checkpoint(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as e:  # noqa: BLE001
        raise CheckpointError(f"Failed to read checkpoint: {path}") from e
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format in {path}")
    return payload


def _meta_from(payload: dict) -> CheckpointMeta:
    return CheckpointMeta(
        task_index=payload["task_index"],
        seed=payload["seed"],
        config_hash=payload["config_hash"],
        head_classes={int(t): list(c) for t, c in payload["head_classes"].items()},
    )


def load_checkpoint(path: str | Path) -> tuple[ContinualEncoder, CheckpointMeta]:
    payload = _read_checkpoint(path)
    model = ContinualEncoder(
        EncoderConfig(**payload["encoder"]),
        ProjectorConfig(**payload["projector"]),
        HeadConfig(**payload["head"]) if payload["head"] is not None else None,
    )
    restore_state(model, payload)
    return model.eval(), _meta_from(payload)


def restore_state(model: ContinualEncoder, payload: dict) -> None:
    for t, classes in sorted(payload["head_classes"].items(), key=lambda kv: int(kv[0])):
        model.add_head(int(t), tuple(classes), seed=0)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError("Checkpoint does not match the model layout") from e


def load_into(model: ContinualEncoder, path: str | Path) -> CheckpointMeta:
    """Load a checkpoint into an existing model, creating any heads it is missing."""
    payload = _read_checkpoint(path)
    restore_state(model, payload)
    return _meta_from(payload)


def load_snapshot(path: str | Path) -> FrozenSnapshot:
    model, meta = load_checkpoint(path)
    return FrozenSnapshot(model, task_index=meta.task_index)


def read_checkpoint_meta(path: str | Path) -> CheckpointMeta:
    return _meta_from(_read_checkpoint(path))
