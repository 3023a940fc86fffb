"""Training losses.

All functions are pure: they depend only on their arguments and hold no state, so they are
re-entrant and thread-safe. Embedding-consuming losses expect projector outputs; plain SL
consumes head logits over backbone features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ObjectiveConfig
from .errors import (
    DegenerateBatchError,
    LabelOutOfRangeError,
    NoPositiveError,
    ShapeMismatchError,
    ZeroVectorError,
)

_EPS = 1e-12


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeMismatchError(
            f"{what}: expected two equal B x d matrices, got {tuple(a.shape)} and {tuple(b.shape)}"
        )


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError("ce_loss expects B x C logits and B labels")
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise LabelOutOfRangeError(f"labels must lie in [0, {n_classes})")
    return F.cross_entropy(logits, labels)


def cosine_softmax_loss(
    features: torch.Tensor,
    class_weights: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Cross-entropy over cos(feature, class weight) / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if features.ndim != 2 or class_weights.ndim != 2 or features.shape[1] != class_weights.shape[1]:
        raise ShapeMismatchError("features (B x d) and class_weights (C x d) must share d")
    zero_feature = bool((features.norm(dim=1) <= _EPS).any())
    if zero_feature or bool((class_weights.norm(dim=1) <= _EPS).any()):
        raise ZeroVectorError("features and class weights must have non-zero norm")
    logits = F.normalize(features, dim=1) @ F.normalize(class_weights, dim=1).T / temperature
    return ce_loss(logits, labels)


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor, temperature: float) -> torch.Tensor:
    """Supervised contrastive loss, positives averaged outside the log.

    `embeddings` holds all views stacked (e.g. 2B x d) and should be unit-norm; `labels` aligns
    with its rows. Every anchor needs at least one other row with its label.
    """
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise ShapeMismatchError("supcon_loss expects N x d embeddings and N labels")
    n = embeddings.shape[0]
    self_mask = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    positives = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = positives.sum(dim=1)
    if bool((n_pos == 0).any()):
        missing = torch.nonzero(n_pos == 0).flatten().tolist()
        raise NoPositiveError(f"anchors without a positive: {missing}")

    sim = embeddings @ embeddings.T / temperature
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    mean_pos = log_prob.masked_fill(~positives, 0.0).sum(dim=1) / n_pos
    return -mean_pos.mean()


def barlow_twins_loss(z1: torch.Tensor, z2: torch.Tensor, lambd: float) -> torch.Tensor:
    """Sum_i (1 - C_ii)^2 + lambd * Sum_{i != j} C_ij^2 over batch-standardized embeddings."""
    _check_pair(z1, z2, "barlow_twins_loss")
    b = z1.shape[0]
    if b < 2:
        raise DegenerateBatchError("barlow_twins_loss needs a batch of at least 2")
    std1 = z1.std(dim=0, unbiased=False)
    std2 = z2.std(dim=0, unbiased=False)
    if bool((std1 <= _EPS).any()) or bool((std2 <= _EPS).any()):
        raise DegenerateBatchError("an embedding dimension has zero variance over the batch")

    n1 = (z1 - z1.mean(dim=0)) / std1
    n2 = (z2 - z2.mean(dim=0)) / std2
    c = n1.T @ n2 / b
    on_diag = (torch.diagonal(c) - 1).pow(2).sum()
    off_diag = c.pow(2).sum() - torch.diagonal(c).pow(2).sum()
    return on_diag + lambd * off_diag


def simclr_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent over 2B anchors; row i of z1 and row i of z2 are positives."""
    _check_pair(z1, z2, "simclr_loss")
    b = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2], dim=0), dim=1)
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * b, dtype=torch.bool, device=z.device), float("-inf"))
    targets = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(sim, targets)


def cosine_distill_loss(current: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of 1 - cos(current, target) over the batch."""
    _check_pair(current, target, "cosine_distill_loss")
    if bool((current.norm(dim=1) <= _EPS).any()) or bool((target.norm(dim=1) <= _EPS).any()):
        raise ZeroVectorError("cosine distillation needs non-zero vectors")
    return (1 - F.cosine_similarity(current, target, dim=1)).mean()


@dataclass(frozen=True)
class ViewOutputs:
    """Per-view model outputs needed by the objectives and the strategies."""

    features: tuple[torch.Tensor, ...]
    projected: tuple[torch.Tensor | None, ...]
    logits: torch.Tensor | None = None
    head_input: torch.Tensor | None = None


def embedding_loss(
    objective: ObjectiveConfig,
    z1: torch.Tensor,
    z2: torch.Tensor,
    labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """The objective's own loss between two embedding sets (used by training and by CaSSLe)."""
    if objective.name == "barlow":
        return barlow_twins_loss(z1, z2, objective.barlow_lambda)
    if objective.name == "simclr":
        return simclr_loss(z1, z2, objective.temperature)
    if objective.name == "supcon":
        if labels is None:
            raise ValueError("supcon needs labels")
        return supcon_loss(torch.cat([z1, z2]), torch.cat([labels, labels]), objective.temperature)
    raise ValueError(f"{objective.name} is not an embedding objective")


def objective_loss(
    objective: ObjectiveConfig,
    outputs: ViewOutputs,
    labels: torch.Tensor,
    *,
    local_labels: torch.Tensor | None = None,
    class_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Base loss of one training step, dispatched on the objective name."""
    if objective.name in {"sl", "sl_mlp"}:
        if outputs.logits is None or local_labels is None:
            raise ValueError(f"{objective.name} needs head logits and task-local labels")
        return ce_loss(outputs.logits, local_labels)
    if objective.name == "trex":
        if outputs.head_input is None or class_weights is None or local_labels is None:
            raise ValueError("trex needs head inputs, class weights and task-local labels")
        return cosine_softmax_loss(
            outputs.head_input, class_weights, local_labels, objective.temperature
        )

    z1, z2 = outputs.projected[0], outputs.projected[1]
    if z1 is None or z2 is None:
        raise ValueError(f"{objective.name} needs projected embeddings of two views")
    return embedding_loss(objective, z1, z2, labels)
