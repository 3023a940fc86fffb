from pathlib import Path

import pytest
import torch

from continual_repr.config import (
    EncoderConfig,
    HeadConfig,
    ObjectiveConfig,
    ProjectorConfig,
    StrategyConfig,
    TrainLoopConfig,
)
from continual_repr.datasets import DatasetStore
from continual_repr.encoder import ContinualEncoder, CosineHead
from continual_repr.errors import MissingSnapshotError, NonFiniteLossError
from continual_repr.models import BoundaryEvaluation, MetricRecord
from continual_repr.task_stream import build_sequence
from continual_repr.training import (
    BoundaryContext,
    TrainLog,
    read_train_log,
    run_sequence,
    train_task,
)
from continual_repr.utils import seeded

SL = ObjectiveConfig(name="sl")


def _model(objective: str = "sl") -> ContinualEncoder:
    projector = (
        ProjectorConfig(enabled=False)
        if objective == "sl"
        else ProjectorConfig(hidden_dim=32, output_dim=16, output_l2_normalize=True)
    )
    head = HeadConfig(kind="linear", input="backbone") if objective == "sl" else None
    with seeded(0):
        return ContinualEncoder(EncoderConfig(image_size=8), projector, head)


def _loop(**kw) -> TrainLoopConfig:
    values = {"epochs_first_task": 1, "epochs_per_task": 1, "lr": 0.05, "batch_size": 16}
    values.update(kw)
    return TrainLoopConfig(**values)


def _params(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def _probe() -> torch.Tensor:
    return torch.rand(6, 3, 8, 8, generator=torch.Generator().manual_seed(11))


def test_zero_epochs_leaves_parameters_untouched(store: DatasetStore) -> None:
    model = _model()
    before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    task = build_sequence("TOY4/2").tasks[0]
    result = train_task(
        model, task, SL, StrategyConfig(), _loop(epochs_first_task=0), store=store
    )
    after = model.backbone.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert result.log == []
    assert "0" in model.heads
    x = _probe()
    assert torch.equal(result.snapshot.forward_features(x), model.eval().forward_features(x))


def test_zero_learning_rate_does_not_move_parameters(store: DatasetStore) -> None:
    model = _model()
    task = build_sequence("TOY4/2").tasks[0]
    model.add_head(0, task.class_ids, seed=1)
    before = _params(model)
    result = train_task(model, task, SL, StrategyConfig(), _loop(lr=0.0), store=store)
    assert result.log
    after = _params(model)
    for name, value in before.items():
        assert torch.allclose(after[name], value, atol=1e-7), name


def test_later_task_needs_snapshot(store: DatasetStore) -> None:
    task = build_sequence("TOY4/2").tasks[1]
    with pytest.raises(MissingSnapshotError):
        train_task(_model(), task, SL, StrategyConfig(name="lwf"), _loop(), store=store)


def _two_tasks(strategy: StrategyConfig, store: DatasetStore) -> tuple[list, ContinualEncoder]:
    model = _model()
    seq = build_sequence("TOY4/2")
    first = train_task(model, seq.tasks[0], SL, strategy, _loop(), store=store)
    second = train_task(
        model, seq.tasks[1], SL, strategy, _loop(), store=store, previous=first.snapshot
    )
    return first.log + second.log, model


@pytest.mark.parametrize("name", ["lwf", "pfr"])
def test_zero_penalty_weight_matches_finetune(name: str, store: DatasetStore) -> None:
    base_log, base_model = _two_tasks(StrategyConfig(name="finetune"), store)
    log, model = _two_tasks(StrategyConfig(name=name, penalty_weight=0.0), store)
    assert [r.total for r in log] == [r.total for r in base_log]
    assert all(r.penalty == 0.0 for r in log)
    expected = _params(base_model)
    for key, value in _params(model).items():
        assert torch.equal(value, expected[key]), key


def test_training_does_not_disturb_previous_snapshot(store: DatasetStore) -> None:
    model = _model()
    seq = build_sequence("TOY4/2")
    first = train_task(model, seq.tasks[0], SL, StrategyConfig(name="lwf"), _loop(), store=store)
    x = _probe()
    frozen = first.snapshot.forward_features(x).clone()
    second = train_task(
        model,
        seq.tasks[1],
        SL,
        StrategyConfig(name="lwf"),
        _loop(),
        store=store,
        previous=first.snapshot,
    )
    assert torch.equal(first.snapshot.forward_features(x), frozen)
    assert any(r.penalty > 0 for r in second.log)


def test_non_finite_loss_aborts_with_diagnostics(
    store: DatasetStore, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setattr(
        "continual_repr.training.objective_loss",
        lambda *a, **kw: torch.tensor(float("nan")),
    )
    task = build_sequence("TOY4/2").tasks[0]
    log = TrainLog()
    with pytest.raises(NonFiniteLossError) as exc:
        train_task(_model(), task, SL, StrategyConfig(), _loop(), store=store, log=log)
    assert exc.value.diagnostics["task"] == 0
    assert exc.value.diagnostics["step"] == 0


def test_small_task_is_fit_perfectly(store: DatasetStore) -> None:
    task = build_sequence("TOY4/2").tasks[0]
    loop = _loop(
        epochs_first_task=200, max_train_per_class=5, lr=0.05, lr_schedule="constant"
    )
    result = train_task(_model(), task, SL, StrategyConfig(), loop, store=store)
    assert len(result.log) == 200
    assert result.epochs[-1].train_accuracy == 1.0


def test_two_view_objective_logs_losses(store: DatasetStore) -> None:
    task = build_sequence("TOY4/2").tasks[0]
    simclr = ObjectiveConfig(name="simclr")
    result = train_task(_model("simclr"), task, simclr, StrategyConfig(), _loop(), store=store)
    assert result.log
    assert all(r.penalty == 0.0 for r in result.log)
    assert result.epochs[0].train_accuracy is None


class _StepTrackingSGD(torch.optim.SGD):
    def __init__(self, params, lr: float) -> None:
        super().__init__(params, lr=lr)
        self.stepped = False

    def zero_grad(self, set_to_none: bool = True) -> None:
        self.stepped = False
        super().zero_grad(set_to_none=set_to_none)

    def step(self, closure=None):
        self.stepped = True
        return super().step(closure)


def test_cosine_head_accuracy_uses_pre_step_weights(
    store: DatasetStore, monkeypatch: pytest.MonkeyPatch
) -> None:
    optimizers: list[_StepTrackingSGD] = []

    def make_tracking(params, loop):
        optimizers.append(_StepTrackingSGD(params, lr=loop.lr))
        return optimizers[-1]

    after_step: list[bool] = []
    original_forward = CosineHead.forward

    def recording_forward(self, x):
        after_step.append(optimizers[-1].stepped)
        return original_forward(self, x)

    monkeypatch.setattr("continual_repr.training.make_optimizer", make_tracking)
    monkeypatch.setattr(CosineHead, "forward", recording_forward)

    projector = ProjectorConfig(hidden_dim=32, output_dim=16, output_l2_normalize=True)
    with seeded(0):
        model = ContinualEncoder(
            EncoderConfig(image_size=8),
            projector,
            HeadConfig(kind="cosine", input="projector", temperature=0.1),
        )
    trex = ObjectiveConfig(name="trex")
    task = build_sequence("TOY4/2").tasks[0]
    result = train_task(model, task, trex, StrategyConfig(), _loop(), store=store)

    assert after_step
    assert not any(after_step)
    assert result.epochs[0].train_accuracy is not None


def test_deterministic_kernels_are_scoped_to_training(store: DatasetStore) -> None:
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(False)
    try:
        task = build_sequence("TOY4/2").tasks[0]
        train_task(_model(), task, SL, StrategyConfig(), _loop(), store=store)
        assert not torch.are_deterministic_algorithms_enabled()
    finally:
        torch.use_deterministic_algorithms(previous)


def test_train_log_flush_and_truncate(tmp_path: Path, store: DatasetStore) -> None:
    path = tmp_path / "train_log.jsonl"
    log = TrainLog(path)
    model = _model()
    seq = build_sequence("TOY4/2")
    first = train_task(model, seq.tasks[0], SL, StrategyConfig(), _loop(), store=store, log=log)
    train_task(
        model,
        seq.tasks[1],
        SL,
        StrategyConfig(),
        _loop(),
        store=store,
        previous=first.snapshot,
        log=log,
    )
    on_disk = read_train_log(path)
    assert [r.task for r in on_disk] == [r.task for r in log.records]
    assert {r.task for r in on_disk} == {0, 1}

    log.truncate_from(1)
    assert {r.task for r in read_train_log(path)} == {0}
    assert {r.task for r in log.records} == {0}
    assert read_train_log(tmp_path / "absent.jsonl") == []


def _sequence_kwargs(tmp_path: Path, store: DatasetStore, **kw):
    values = {
        "model": _model(),
        "store": store,
        "run_dir": tmp_path / "run",
        "run_id": "toy-seed0",
        "training_hash": "train-h",
        "config_hash": "eval-h",
    }
    values.update(kw)
    return values


def test_run_sequence_checkpoints_and_evaluates_every_boundary(
    tmp_path: Path, store: DatasetStore
) -> None:
    seen: list[BoundaryContext] = []

    def hook(ctx: BoundaryContext) -> BoundaryEvaluation:
        seen.append(ctx)
        record = MetricRecord(
            metric="knn_task_agnostic", value=50.0 + ctx.task_id, boundary=ctx.task_id, seed=0
        )
        return BoundaryEvaluation(
            task_id=ctx.task_id, config_hash=ctx.config_hash, records=[record]
        )

    seq = build_sequence("TOY4/2")
    result = run_sequence(
        seq, SL, StrategyConfig(), _loop(), **_sequence_kwargs(tmp_path, store, eval_hook=hook)
    )
    assert len(result.checkpoints) == 2
    assert all(p.exists() for p in result.checkpoints)
    assert len(result.evaluations) == 2
    assert [c.task_id for c in seen] == [0, 1]
    assert [r.value for r in result.report.records] == [50.0, 51.0]
    assert result.trained_tasks == [0, 1]
    assert result.train_log is not None and result.train_log.exists()

    again = run_sequence(
        seq, SL, StrategyConfig(), _loop(), **_sequence_kwargs(tmp_path, store, eval_hook=hook)
    )
    assert again.trained_tasks == []
    assert len(seen) == 2
    assert again.report == result.report


def test_run_sequence_is_deterministic(tmp_path: Path, store: DatasetStore) -> None:
    seq = build_sequence("TOY4/2")
    a = run_sequence(seq, SL, StrategyConfig(), _loop(), **_sequence_kwargs(tmp_path / "a", store))
    b = run_sequence(seq, SL, StrategyConfig(), _loop(), **_sequence_kwargs(tmp_path / "b", store))
    log_a = [r.total for r in read_train_log(a.train_log)]
    log_b = [r.total for r in read_train_log(b.train_log)]
    assert log_a == log_b
    assert a.report == b.report
