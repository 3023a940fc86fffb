from pathlib import Path

import pytest

from continual_repr.config import EncoderConfig, ProjectorConfig
from continual_repr.encoder import ContinualEncoder, save_checkpoint
from continual_repr.models import BoundaryEvaluation
from continual_repr.resume import (
    build_resume_plan,
    checkpoint_path,
    compute_run_state,
    eval_record_path,
    read_eval_record,
    write_eval_record,
)
from continual_repr.utils import seeded


@pytest.fixture(scope="module")
def model() -> ContinualEncoder:
    with seeded(0):
        return ContinualEncoder(EncoderConfig(image_size=8), ProjectorConfig(enabled=False))


def _boundary(run: Path, model: ContinualEncoder, t: int, *, train_hash: str = "T") -> None:
    save_checkpoint(model, checkpoint_path(run, t), task_index=t, seed=0, config_hash=train_hash)
    write_eval_record(eval_record_path(run, t), BoundaryEvaluation(task_id=t, config_hash="E"))


def _plan(run: Path, n: int = 3):
    return build_resume_plan(run, n, run_id="r", seed=0, training_hash="T", eval_hash="E")


def test_fresh_directory_trains_everything(tmp_path: Path) -> None:
    plan = _plan(tmp_path)
    assert plan.tasks_to_train == [0, 1, 2]
    assert plan.tasks_to_evaluate == [0, 1, 2]
    assert [b.status for b in plan.boundaries] == ["missing", "stale", "stale"]


def test_complete_directory_is_reused(tmp_path: Path, model: ContinualEncoder) -> None:
    for t in range(3):
        _boundary(tmp_path, model, t)
    plan = _plan(tmp_path)
    assert plan.tasks_to_train == []
    assert plan.tasks_to_evaluate == []


def test_resumes_after_last_complete_boundary(tmp_path: Path, model: ContinualEncoder) -> None:
    _boundary(tmp_path, model, 0)
    _boundary(tmp_path, model, 1)
    checkpoint_path(tmp_path, 1).unlink()
    _boundary(tmp_path, model, 2)
    plan = _plan(tmp_path)
    assert plan.tasks_to_train == [1, 2]
    assert plan.tasks_to_evaluate == [1, 2]
    assert plan.boundaries[2].reasons == ["depends_on_retrained:1"]


def test_changed_training_config_retrains(tmp_path: Path, model: ContinualEncoder) -> None:
    _boundary(tmp_path, model, 0, train_hash="old")
    states = compute_run_state(tmp_path, 1, seed=0, training_hash="T", eval_hash="E")
    assert states[0].status == "stale"
    assert states[0].reasons == ["training_config_changed"]

    states = compute_run_state(tmp_path, 1, seed=3, training_hash="old", eval_hash="E")
    assert states[0].reasons == ["seed_changed"]


def test_changed_eval_config_only_reevaluates(tmp_path: Path, model: ContinualEncoder) -> None:
    _boundary(tmp_path, model, 0)
    plan = build_resume_plan(tmp_path, 1, run_id="r", seed=0, training_hash="T", eval_hash="E2")
    assert plan.tasks_to_train == []
    assert plan.tasks_to_evaluate == [0]
    assert plan.boundaries[0].reasons == ["eval_config_changed"]


def test_unreadable_checkpoint_counts_as_missing(tmp_path: Path) -> None:
    checkpoint_path(tmp_path, 0).write_bytes(b"garbage")
    states = compute_run_state(tmp_path, 1, seed=0, training_hash="T", eval_hash="E")
    assert states[0].status == "missing"
    assert states[0].reasons == ["unreadable_checkpoint"]


def test_eval_records(tmp_path: Path) -> None:
    path = eval_record_path(tmp_path, 4)
    assert read_eval_record(path) is None
    record = BoundaryEvaluation(task_id=4, config_hash="E", flags=["nmc_ordering_violation@4"])
    write_eval_record(path, record)
    assert read_eval_record(path) == record
    path.write_text("{", encoding="utf-8")
    assert read_eval_record(path) is None
