import os
from pathlib import Path

import pytest
import torch

from continual_repr.embedding_io import (
    dump_path,
    load_embeddings,
    read_dump_meta,
    save_embeddings,
    sidecar_path,
)
from continual_repr.errors import EmbeddingDumpError
from continual_repr.evaluation import EmbeddingMatrix
from continual_repr.models import EmbeddingSource


def _matrix(source: EmbeddingSource | None) -> EmbeddingMatrix:
    g = torch.Generator().manual_seed(0)
    return EmbeddingMatrix(torch.randn(7, 5, generator=g), torch.arange(7) % 3, source)


def test_dump_layout(tmp_path: Path) -> None:
    path = dump_path(tmp_path, 2, "C10", "test")
    assert path == tmp_path / "embeddings" / "boundary2_C10_test.npz"
    assert sidecar_path(path).name == "boundary2_C10_test.json"


def test_saved_dump_carries_provenance(tmp_path: Path) -> None:
    source = EmbeddingSource(run_id="toy-seed0", boundary=1, split="test", dataset="TOY4")
    matrix = _matrix(source)
    path = save_embeddings(matrix, dump_path(tmp_path, 1, "TOY4", "test"), backbone_hash="abc")

    meta = read_dump_meta(path)
    assert (meta.run_id, meta.boundary) == ("toy-seed0", 1)
    assert (meta.dataset, meta.split) == ("TOY4", "test")
    assert (meta.n, meta.d, meta.backbone_hash) == (7, 5, "abc")

    loaded = load_embeddings(path)
    assert torch.equal(loaded.features, matrix.features)
    assert torch.equal(loaded.labels, matrix.labels)
    assert loaded.source == source
    assert not list(path.parent.glob("*.tmp*"))


def test_dump_needs_source(tmp_path: Path) -> None:
    with pytest.raises(EmbeddingDumpError):
        save_embeddings(_matrix(None), tmp_path / "x.npz", backbone_hash="h")


def test_missing_or_inconsistent_dumps(tmp_path: Path) -> None:
    with pytest.raises(EmbeddingDumpError):
        load_embeddings(tmp_path / "absent.npz")

    source = EmbeddingSource(run_id="r", boundary=0, split="train")
    path = save_embeddings(_matrix(source), tmp_path / "a.npz", backbone_hash="h")
    side = sidecar_path(path)
    side.write_text(side.read_text(encoding="utf-8").replace('"n": 7', '"n": 9'), encoding="utf-8")
    # loads are cached per mtime
    stat = path.stat()
    os.utime(path, (stat.st_atime, stat.st_mtime + 5))
    with pytest.raises(EmbeddingDumpError):
        load_embeddings(path)

    side.unlink()
    with pytest.raises(EmbeddingDumpError):
        read_dump_meta(path)
