from __future__ import annotations

import logging
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .config import ObjectiveConfig, StrategyConfig
from .encoder import ContinualEncoder, Encoded, FrozenSnapshot, build_mlp
from .errors import ProjectorDisabledError, ShapeMismatchError
from .objectives import cosine_distill_loss, embedding_loss
from .utils import seeded

logger = logging.getLogger(__name__)


def lwf_penalty(
    new_logits_old_heads: torch.Tensor,
    snapshot_logits_old_heads: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Mean KL(snapshot || live) between temperature-softened distributions of one old head."""
    same_shape = new_logits_old_heads.shape == snapshot_logits_old_heads.shape
    if not same_shape or new_logits_old_heads.ndim != 2:
        raise ShapeMismatchError("live and snapshot logits must both be B x C with equal shapes")
    log_q = F.log_softmax(new_logits_old_heads / temperature, dim=1)
    log_p = F.log_softmax(snapshot_logits_old_heads.detach() / temperature, dim=1)
    return F.kl_div(log_q, log_p, log_target=True, reduction="batchmean")


def cassle_penalty(
    current_projected: torch.Tensor | None,
    snapshot_projected: torch.Tensor,
    predictor: nn.Module,
    objective: ObjectiveConfig | Literal["cosine"],
    labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """The objective's own loss between predictor(current) and the frozen past embeddings."""
    if current_projected is None:
        raise ProjectorDisabledError("CaSSLe distills projector outputs; the projector is disabled")
    predicted = predictor(current_projected)
    target = snapshot_projected.detach()
    if objective == "cosine":
        return cosine_distill_loss(predicted, target)
    if objective.name == "supcon":
        predicted, target = F.normalize(predicted, dim=1), F.normalize(target, dim=1)
    return embedding_loss(objective, predicted, target, labels)


def pfr_penalty(
    current_backbone_feats: torch.Tensor,
    snapshot_backbone_feats: torch.Tensor,
    predictor: nn.Module,
) -> torch.Tensor:
    """Mean of 1 - cos(predictor(f_t(x)), f_{t-1}(x)); lies in [0, 2]."""
    return cosine_distill_loss(predictor(current_backbone_feats), snapshot_backbone_feats.detach())


def build_predictor(in_dim: int, cfg: StrategyConfig, *, seed: int) -> nn.Module:
    with seeded(seed):
        return build_mlp(
            in_dim, cfg.predictor_hidden_dim, in_dim, cfg.predictor_depth, batch_norm=True
        )


class ContinualStrategy:
    """Computes the regularization term against the previous boundary's snapshot."""

    def __init__(self, cfg: StrategyConfig, objective: ObjectiveConfig) -> None:
        self.cfg = cfg
        self.objective = objective
        self.predictor: nn.Module | None = None
        self.previous: FrozenSnapshot | None = None
        self.task_id = 0

    @property
    def name(self) -> str:
        return self.cfg.name

    @property
    def weight(self) -> float:
        return self.cfg.weight

    @property
    def active(self) -> bool:
        return self.cfg.name != "finetune" and self.previous is not None

    def begin_task(
        self,
        model: ContinualEncoder,
        task_id: int,
        previous: FrozenSnapshot | None,
        *,
        seed: int,
    ) -> list[nn.Parameter]:
        """Reset per-task state; returns extra trainable parameters (the fresh predictor)."""
        self.task_id = task_id
        self.previous = previous
        self.predictor = None
        if not self.active:
            return []

        device = next(model.parameters()).device
        if self.cfg.name == "pfr":
            self.predictor = build_predictor(model.feature_dim, self.cfg, seed=seed).to(device)
        elif self.cfg.name == "cassle":
            if model.projector is None:
                raise ProjectorDisabledError("CaSSLe needs a projector")
            out_dim = model.projector_cfg.output_dim
            self.predictor = build_predictor(out_dim, self.cfg, seed=seed).to(device)
        if self.predictor is None:
            return []
        self.predictor.train()
        logger.debug("predictor_reset", extra={"strategy": self.cfg.name, "task": task_id})
        return list(self.predictor.parameters())

    def penalty(
        self,
        model: ContinualEncoder,
        views: tuple[torch.Tensor, ...],
        encoded: list[Encoded],
        labels: torch.Tensor,
    ) -> torch.Tensor:
        zero = encoded[0].features.new_zeros(())
        if not self.active:
            return zero
        prev = self.previous
        assert prev is not None

        if self.cfg.name == "lwf":
            old_encoded = prev.encode(views[0])
            # mean over old heads
            per_head = [
                lwf_penalty(
                    model.head_logits(t, encoded[0]),
                    prev.head_logits(t, old_encoded),
                    self.cfg.distill_temperature,
                )
                for t in sorted(prev.head_classes)
                if t < self.task_id
            ]
            return torch.stack(per_head).mean() if per_head else zero

        assert self.predictor is not None
        terms: list[torch.Tensor] = []
        for view, enc in zip(views, encoded, strict=True):
            old = prev.encode(view)
            if self.cfg.name == "pfr":
                terms.append(pfr_penalty(enc.features, old.features, self.predictor))
            else:
                if old.projected is None:
                    raise ProjectorDisabledError("snapshot has no projector")
                terms.append(
                    cassle_penalty(
                        enc.projected, old.projected, self.predictor, self.objective, labels
                    )
                )
        return torch.stack(terms).mean()
