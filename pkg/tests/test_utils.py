from pathlib import Path

import pytest
import torch

from continual_repr.utils import (
    derive_seed,
    deterministic_algorithms,
    resolve_device,
    seeded,
    sha256_file,
    sha256_text,
    stable_hash,
)


def test_stable_hash_ignores_key_order() -> None:
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
    assert stable_hash({"a": 1}) != stable_hash({"a": 2})
    assert len(stable_hash({})) == 16


def test_sha256_file_matches_text(tmp_path: Path) -> None:
    p = tmp_path / "x.txt"
    p.write_text("hello", encoding="utf-8")
    assert sha256_file(p, chunk_size=2) == sha256_text("hello")


def test_derive_seed_separates_purposes() -> None:
    seeds = {derive_seed(0, t, purpose) for t in range(3) for purpose in range(5)}
    assert len(seeds) == 15
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert 0 <= derive_seed(1, 2, 3) < 2**63


def test_seeded_leaves_global_stream_untouched() -> None:
    torch.manual_seed(0)
    expected = torch.rand(3)

    torch.manual_seed(0)
    with seeded(123):
        inner = torch.rand(3)
    after = torch.rand(3)
    with seeded(123):
        again = torch.rand(3)

    assert torch.equal(after, expected)
    assert torch.equal(inner, again)


def test_resolve_device(monkeypatch: pytest.MonkeyPatch) -> None:
    assert resolve_device("cpu") == torch.device("cpu")
    monkeypatch.setenv("CONTINUAL_REPR_DEVICE", "cpu")
    assert resolve_device("auto") == torch.device("cpu")


def test_deterministic_algorithms_restores_settings() -> None:
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(False)
    try:
        with deterministic_algorithms():
            assert torch.are_deterministic_algorithms_enabled()
            assert not torch.backends.cudnn.benchmark
        assert not torch.are_deterministic_algorithms_enabled()
    finally:
        torch.use_deterministic_algorithms(previous)
