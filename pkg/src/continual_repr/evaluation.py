"""Representation metrics.

Every function here is a pure function of its inputs. Accuracies come back as fractions in
[0, 1]; the reporting layer converts them to percentage points.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import ImageSet
from .encoder import ContinualEncoder, FrozenSnapshot
from .errors import (
    DegenerateInputError,
    DegenerateMeanError,
    EmptyReferenceError,
    MissingClassError,
    ProvenanceMismatchError,
    ShapeMismatchError,
)
from .models import AugmentationPolicy, EmbeddingSource, SpectrumRecord
from .task_stream import build_transform

logger = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_KNN_TEMPERATURE = 0.07
VARIANCE_LEVEL = 0.95
_NORM_EPS = 1e-8


@dataclass(frozen=True)
class EmbeddingMatrix:
    features: torch.Tensor  # N x d
    labels: torch.Tensor  # N, global label space
    source: EmbeddingSource | None = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ShapeMismatchError(f"features must be N x d, got {tuple(self.features.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeMismatchError("labels must be a vector aligned with the feature rows")
        if not bool(torch.isfinite(self.features).all()):
            raise DegenerateInputError("embedding matrix contains non-finite entries")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in torch.unique(self.labels))

    def restrict(self, class_ids: Iterable[int]) -> EmbeddingMatrix:
        """Rows whose label is in `class_ids`."""
        wanted = torch.as_tensor(sorted(class_ids), dtype=self.labels.dtype)
        keep = torch.isin(self.labels, wanted)
        return EmbeddingMatrix(self.features[keep], self.labels[keep], self.source)

    def subsample(self, max_rows: int, *, seed: int) -> EmbeddingMatrix:
        if len(self) <= max_rows:
            return self
        g = torch.Generator().manual_seed(seed)
        index, _ = torch.sort(torch.randperm(len(self), generator=g)[:max_rows])
        return EmbeddingMatrix(self.features[index], self.labels[index], self.source)


@torch.no_grad()
def extract_embeddings(
    state: ContinualEncoder | FrozenSnapshot,
    data: ImageSet,
    policy: AugmentationPolicy,
    *,
    batch_size: int = 512,
    device: torch.device | None = None,
    source: EmbeddingSource | None = None,
) -> EmbeddingMatrix:
    """Backbone features of `data` under a deterministic evaluation transform.

    `data.labels` are kept as given, so callers pass labels already shifted into the global space.
    """
    model = state.model if isinstance(state, FrozenSnapshot) else state
    was_training = model.training
    model.eval()
    device = device or next(model.parameters()).device
    transform = build_transform(policy)
    chunks: list[torch.Tensor] = []
    for start in range(0, len(data), batch_size):
        images = transform(data.images[start : start + batch_size]).to(device)
        chunks.append(model.forward_features(images).float().cpu())
    model.train(was_training)
    features = torch.cat(chunks) if chunks else torch.empty(0, model.feature_dim)
    return EmbeddingMatrix(features, data.labels.clone(), source)


def knn_predict(
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    k: int = DEFAULT_K,
    temperature: float = DEFAULT_KNN_TEMPERATURE,
    *,
    chunk_size: int = 1024,
) -> torch.Tensor:
    """Similarity-weighted k-NN vote over cosine similarities.

    Neighbours with equal similarity are taken in reference order; vote ties go to the lowest
    class id.
    """
    if len(train) == 0:
        raise EmptyReferenceError("k-NN reference set is empty")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if train.dim != test.dim:
        raise ShapeMismatchError(f"train has d={train.dim}, test has d={test.dim}")
    k = min(k, len(train))
    classes = torch.unique(train.labels)  # sorted
    ref = F.normalize(train.features, dim=1)
    ref_idx = torch.searchsorted(classes, train.labels)
    preds: list[torch.Tensor] = []
    for start in range(0, len(test), chunk_size):
        q = F.normalize(test.features[start : start + chunk_size].to(ref.dtype), dim=1)
        sim = q @ ref.T
        top_sim, top_idx = torch.sort(sim, dim=1, descending=True, stable=True)
        top_sim, top_idx = top_sim[:, :k], top_idx[:, :k]
        weights = torch.exp(top_sim / temperature)
        votes = torch.zeros(q.shape[0], classes.numel(), dtype=weights.dtype)
        votes.scatter_add_(1, ref_idx[top_idx], weights)
        preds.append(classes[votes.argmax(dim=1)])
    if not preds:
        return torch.empty(0, dtype=train.labels.dtype)
    return torch.cat(preds)


def knn_accuracy(
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    k: int = DEFAULT_K,
    temperature: float = DEFAULT_KNN_TEMPERATURE,
) -> float:
    if len(test) == 0:
        raise DegenerateInputError("k-NN needs at least one test point")
    pred = knn_predict(train, test, k, temperature)
    return float((pred == test.labels).double().mean())


def _check_same_boundary(train: EmbeddingMatrix, test: EmbeddingMatrix) -> None:
    a, b = train.source, test.source
    if a is None or b is None:
        return
    if (a.run_id, a.boundary) != (b.run_id, b.boundary):
        raise ProvenanceMismatchError(
            f"reference from {a.run_id}@{a.boundary} but queries from {b.run_id}@{b.boundary}"
        )


def task_agnostic_knn(
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    k: int = DEFAULT_K,
    temperature: float = DEFAULT_KNN_TEMPERATURE,
) -> float:
    """k-NN over the whole label space, seen and unseen tasks alike; both sets from one boundary."""
    _check_same_boundary(train, test)
    return knn_accuracy(train, test, k, temperature)


def task_aware_knn(
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    class_ids: Iterable[int],
    k: int = DEFAULT_K,
    temperature: float = DEFAULT_KNN_TEMPERATURE,
) -> float:
    """k-NN with reference and queries restricted to one task's classes."""
    _check_same_boundary(train, test)
    ids = list(class_ids)
    return knn_accuracy(train.restrict(ids), test.restrict(ids), k, temperature)


@dataclass(frozen=True)
class PrototypeSet:
    class_ids: torch.Tensor  # C, sorted
    vectors: torch.Tensor  # C x d, unit norm
    built_at: int | None = None

    def as_dict(self) -> dict[int, torch.Tensor]:
        return {int(c): v for c, v in zip(self.class_ids, self.vectors, strict=True)}


def compute_prototypes(
    train: EmbeddingMatrix,
    *,
    expected_classes: Iterable[int] | None = None,
    built_at: int | None = None,
) -> PrototypeSet:
    present = train.class_ids()
    if expected_classes is not None:
        missing = sorted(set(expected_classes) - set(present))
        if missing:
            raise MissingClassError(f"no samples for classes {missing}")
    if not present:
        raise MissingClassError("cannot build prototypes from an empty set")
    feats = F.normalize(train.features, dim=1)
    classes = torch.as_tensor(present, dtype=train.labels.dtype)
    means = torch.stack([feats[train.labels == c].mean(dim=0) for c in classes])
    norms = means.norm(dim=1)
    degenerate = torch.nonzero(norms <= _NORM_EPS).flatten().tolist()
    if degenerate:
        bad = [present[i] for i in degenerate]
        raise DegenerateMeanError(f"zero-norm class means for classes {bad}")
    return PrototypeSet(class_ids=classes, vectors=means / norms[:, None], built_at=built_at)


def nmc_predict(test: EmbeddingMatrix, protos: PrototypeSet) -> torch.Tensor:
    if test.dim != protos.vectors.shape[1]:
        raise ShapeMismatchError("test features and prototypes differ in dimension")
    sim = F.normalize(test.features.to(protos.vectors.dtype), dim=1) @ protos.vectors.T
    # argmax returns the first maximum, i.e. the lowest class id
    return protos.class_ids[sim.argmax(dim=1)]


def nmc_accuracy(test: EmbeddingMatrix, protos: PrototypeSet) -> float:
    missing = sorted(set(test.class_ids()) - {int(c) for c in protos.class_ids})
    if missing:
        raise MissingClassError(f"no prototype for classes {missing}")
    if len(test) == 0:
        raise DegenerateInputError("NMC needs at least one test point")
    return float((nmc_predict(test, protos) == test.labels).double().mean())


@dataclass(frozen=True)
class NmcStability:
    after_first: float
    stale: float
    upper: float
    ordering_violated: bool


def nmc_stability(
    first_train: EmbeddingMatrix,
    first_test: EmbeddingMatrix,
    later_train: EmbeddingMatrix,
    later_test: EmbeddingMatrix,
    *,
    tolerance: float = 1e-9,
) -> NmcStability:
    """NMC on the first task's data, before and after later training.

    `first_*` are embeddings of the first task's data under the first boundary's backbone,
    `later_*` the same images under a later backbone. The upper bound recomputes prototypes with
    old data, which a real continual learner cannot do.
    """
    protos_first = compute_prototypes(first_train)
    protos_later = compute_prototypes(later_train)
    after = nmc_accuracy(first_test, protos_first)
    stale = nmc_accuracy(later_test, protos_first)
    upper = nmc_accuracy(later_test, protos_later)
    violated = upper < stale - tolerance
    if violated:
        logger.warning("nmc_ordering_violation", extra={"stale": stale, "upper": upper})
    return NmcStability(after_first=after, stale=stale, upper=upper, ordering_violated=violated)


def nmc_stability_protocol(
    first: ContinualEncoder | FrozenSnapshot,
    later: ContinualEncoder | FrozenSnapshot,
    train: ImageSet,
    test: ImageSet,
    policy: AugmentationPolicy,
    *,
    batch_size: int = 512,
    device: torch.device | None = None,
) -> NmcStability:
    def embed(state: ContinualEncoder | FrozenSnapshot, data: ImageSet) -> EmbeddingMatrix:
        return extract_embeddings(state, data, policy, batch_size=batch_size, device=device)

    return nmc_stability(
        embed(first, train), embed(first, test), embed(later, train), embed(later, test)
    )


def linear_cka(x: torch.Tensor, y: torch.Tensor) -> float:
    """Linear CKA between two representations of the same N inputs."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(
            f"need N x d1 and N x d2 matrices, got {tuple(x.shape)} and {tuple(y.shape)}"
        )
    if x.shape[0] < 2:
        raise DegenerateInputError("CKA needs at least two samples")
    x = x.double()
    y = y.double()
    xc = x - x.mean(dim=0, keepdim=True)
    yc = y - y.mean(dim=0, keepdim=True)
    for name, raw, centered in (("X", x, xc), ("Y", y, yc)):
        if float(centered.norm()) <= 1e-10 * float(raw.norm()) or float(centered.norm()) == 0.0:
            raise DegenerateInputError(f"centered {name} is all zero")
    cross = torch.linalg.matrix_norm(yc.T @ xc) ** 2
    denom = torch.linalg.matrix_norm(xc.T @ xc) * torch.linalg.matrix_norm(yc.T @ yc)
    return float(torch.clamp(cross / denom, 0.0, 1.0))


def forgetting(acc_after_own_task: float, acc_after_final: float) -> float:
    return acc_after_own_task - acc_after_final


def forward_transfer(acc_pretrained: float, acc_scratch: float) -> float:
    return acc_pretrained - acc_scratch


def exclusion_difference(acc_with_task: float, acc_without_task: float) -> float:
    return acc_with_task - acc_without_task


def spectrum(embeddings: EmbeddingMatrix | torch.Tensor | np.ndarray) -> SpectrumRecord:
    """Eigen-decomposition of the feature covariance with cumulative explained variance."""
    if isinstance(embeddings, EmbeddingMatrix):
        x = embeddings.features.double().numpy()
    elif isinstance(embeddings, torch.Tensor):
        x = embeddings.detach().double().cpu().numpy()
    else:
        x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError("spectrum needs an N x d matrix")
    n = x.shape[0]
    if n < 2:
        raise DegenerateInputError("spectrum needs at least two samples")

    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / (n - 1)
    eig = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = float(eig.sum())
    scale = float(np.mean(x * x))
    if total <= 1e-12 * scale or total == 0.0:
        raise DegenerateInputError("features are constant; the covariance is zero")

    cumulative = np.maximum.accumulate(np.cumsum(eig) / total)
    cumulative[-1] = 1.0
    var95 = int(np.argmax(cumulative >= VARIANCE_LEVEL - 1e-12)) + 1
    return SpectrumRecord(
        eigenvalues=eig.tolist(), cumulative=cumulative.tolist(), var95_index=var95
    )
