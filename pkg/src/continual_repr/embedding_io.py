from __future__ import annotations

import json
import os
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel

from .errors import EmbeddingDumpError
from .evaluation import EmbeddingMatrix
from .models import EmbeddingSource, Split


class EmbeddingDumpMeta(BaseModel):
    run_id: str
    boundary: int
    dataset: str
    split: Split
    backbone_hash: str
    n: int
    d: int


def dump_path(run_dir: str | Path, boundary: int, dataset: str, split: Split) -> Path:
    return Path(run_dir) / "embeddings" / f"boundary{boundary}_{dataset}_{split}.npz"


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path, *, backbone_hash: str) -> Path:
    if matrix.source is None:
        raise EmbeddingDumpError("embeddings need a source to be dumped")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    meta = EmbeddingDumpMeta(
        run_id=matrix.source.run_id,
        boundary=matrix.source.boundary,
        dataset=matrix.source.dataset,
        split=matrix.source.split,
        backbone_hash=backbone_hash,
        n=len(matrix),
        d=matrix.dim,
    )
    tmp = p.with_name(p.stem + ".tmp.npz")
    np.savez(
        tmp,
        features=matrix.features.float().numpy().astype(np.float32),
        labels=matrix.labels.numpy().astype(np.int64),
    )
    os.replace(tmp, p)
    sidecar_path(p).write_text(
        json.dumps(meta.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
    )
    return p


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    p = Path(path)
    if not p.exists():
        raise EmbeddingDumpError(f"Embedding dump not found: {path}")
    return _load_embeddings_cached(str(p), os.path.getmtime(p))


def read_dump_meta(path: str | Path) -> EmbeddingDumpMeta:
    side = sidecar_path(path)
    try:
        return EmbeddingDumpMeta.model_validate(json.loads(side.read_text(encoding="utf-8")))
    except Exception as e:  # noqa: BLE001
        raise EmbeddingDumpError(f"Failed to read embedding metadata: {side}") from e


@lru_cache(maxsize=16)
def _load_embeddings_cached(path: str, mtime: float) -> EmbeddingMatrix:
    meta = read_dump_meta(path)
    try:
        with np.load(path) as data:
            features = torch.from_numpy(np.array(data["features"], dtype=np.float32))
            labels = torch.from_numpy(np.array(data["labels"], dtype=np.int64))
    except Exception as e:  # noqa: BLE001
        raise EmbeddingDumpError(f"Failed to read embedding dump: {path}") from e
    if tuple(features.shape) != (meta.n, meta.d) or labels.shape[0] != meta.n:
        raise EmbeddingDumpError(f"{path} does not match its metadata ({meta.n} x {meta.d})")
    source = EmbeddingSource(
        run_id=meta.run_id, boundary=meta.boundary, split=meta.split, dataset=meta.dataset
    )
    return EmbeddingMatrix(features, labels, source)
