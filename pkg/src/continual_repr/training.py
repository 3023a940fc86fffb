from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.optim.lr_scheduler import LambdaLR

from .config import ObjectiveConfig, StrategyConfig, TrainLoopConfig
from .datasets import DatasetStore
from .encoder import ContinualEncoder, FrozenSnapshot, load_into, save_checkpoint
from .errors import MissingSnapshotError, NonFiniteLossError
from .models import (
    AugmentationPolicy,
    BoundaryEvaluation,
    MetricReport,
    TaskSequence,
    TaskSpec,
    TrainLogRecord,
)
from .objectives import ViewOutputs, objective_loss
from .resume import (
    build_resume_plan,
    checkpoint_path,
    eval_record_path,
    read_eval_record,
    write_eval_record,
)
from .strategies import ContinualStrategy
from .task_stream import policy_for, task_dataset, task_loader
from .utils import derive_seed, deterministic_algorithms, seed_everything

logger = logging.getLogger(__name__)

# Purposes mixed into derive_seed(seed, task, purpose).
_SEED_GLOBAL, _SEED_HEAD, _SEED_PREDICTOR, _SEED_SUBSAMPLE, _SEED_LOADER = range(5)


class TrainLog:
    """Line-delimited training records, flushed to disk at every epoch end."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[TrainLogRecord] = []
        self._pending: list[TrainLogRecord] = []

    def truncate_from(self, task_id: int) -> None:
        """Drop records of `task_id` and later, e.g. left behind by an interrupted run."""
        self.records = [r for r in self.records if r.task < task_id]
        if self.path is None or not self.path.exists():
            return
        kept: list[str] = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                rec = TrainLogRecord.model_validate(json.loads(line))
            except Exception:  # noqa: BLE001
                continue
            if rec.task < task_id:
                kept.append(line)
        self.path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")

    def append(self, record: TrainLogRecord) -> None:
        self.records.append(record)
        self._pending.append(record)

    def flush(self) -> None:
        if self.path is not None and self._pending:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                for r in self._pending:
                    f.write(json.dumps(r.model_dump(mode="json"), sort_keys=True) + "\n")
        self._pending = []


def read_train_log(path: str | Path) -> list[TrainLogRecord]:
    p = Path(path)
    if not p.exists():
        return []
    return [
        TrainLogRecord.model_validate(json.loads(line))
        for line in p.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


@dataclass
class EpochSummary:
    task: int
    epoch: int
    base_loss: float
    penalty: float
    total: float
    train_accuracy: float | None = None


EpochHook = Callable[[EpochSummary], None]


@dataclass
class TrainTaskResult:
    model: ContinualEncoder
    snapshot: FrozenSnapshot
    log: list[TrainLogRecord] = field(default_factory=list)
    epochs: list[EpochSummary] = field(default_factory=list)


def make_optimizer(params: list[nn.Parameter], loop: TrainLoopConfig) -> torch.optim.Optimizer:
    if loop.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=loop.lr, weight_decay=loop.weight_decay)
    return torch.optim.SGD(
        params, lr=loop.lr, momentum=loop.momentum, weight_decay=loop.weight_decay
    )


def make_scheduler(
    optimizer: torch.optim.Optimizer, loop: TrainLoopConfig, total_steps: int
) -> LambdaLR:
    if loop.lr_schedule == "constant" or total_steps <= 0:
        return LambdaLR(optimizer, lambda _: 1.0)

    def cosine(step: int) -> float:
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))

    return LambdaLR(optimizer, cosine)


def _ensure_strategy(
    strategy: ContinualStrategy | StrategyConfig, objective: ObjectiveConfig
) -> ContinualStrategy:
    if isinstance(strategy, ContinualStrategy):
        return strategy
    return ContinualStrategy(strategy, objective)


def _device_of(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def train_task(
    model: ContinualEncoder,
    task: TaskSpec,
    objective: ObjectiveConfig,
    strategy: ContinualStrategy | StrategyConfig,
    loop: TrainLoopConfig,
    *,
    store: DatasetStore,
    previous: FrozenSnapshot | None = None,
    log: TrainLog | None = None,
    policy: AugmentationPolicy | None = None,
    epoch_hooks: Sequence[EpochHook] = (),
) -> TrainTaskResult:
    """Train `model` in place on one task and return it with its boundary snapshot.

    The total loss of every step is base + weight * penalty. With zero epochs the model is
    returned unchanged (apart from a freshly added head for CE objectives). Deterministic
    kernels are enabled only for the duration of the call.
    """
    with deterministic_algorithms():
        return _train_task(
            model,
            task,
            objective,
            strategy,
            loop,
            store=store,
            previous=previous,
            log=log,
            policy=policy,
            epoch_hooks=epoch_hooks,
        )


def _train_task(
    model: ContinualEncoder,
    task: TaskSpec,
    objective: ObjectiveConfig,
    strategy: ContinualStrategy | StrategyConfig,
    loop: TrainLoopConfig,
    *,
    store: DatasetStore,
    previous: FrozenSnapshot | None = None,
    log: TrainLog | None = None,
    policy: AugmentationPolicy | None = None,
    epoch_hooks: Sequence[EpochHook] = (),
) -> TrainTaskResult:
    strat = _ensure_strategy(strategy, objective)
    t = task.task_id
    if t > 0 and strat.name != "finetune" and previous is None:
        raise MissingSnapshotError(f"{strat.name} needs the snapshot of boundary {t - 1}")

    device = _device_of(model)
    seed_everything(derive_seed(loop.seed, t, _SEED_GLOBAL))
    if objective.ce_family:
        model.add_head(t, task.class_ids, seed=derive_seed(loop.seed, t, _SEED_HEAD))
    prev = previous.to(device) if previous is not None else None
    extra_params = strat.begin_task(model, t, prev, seed=derive_seed(loop.seed, t, _SEED_PREDICTOR))
    log = log if log is not None else TrainLog()
    records: list[TrainLogRecord] = []
    summaries: list[EpochSummary] = []

    epochs = loop.epochs_for(t)
    if epochs == 0:
        logger.info("task_skipped_zero_epochs", extra={"task": t})
        model.eval()
        return TrainTaskResult(model=model, snapshot=FrozenSnapshot(model, task_index=t))

    policy = policy or policy_for(task.dataset_name, two_views=bool(objective.requires_two_views))
    ds = task_dataset(
        task,
        policy,
        store=store,
        max_per_class=loop.max_train_per_class,
        subsample_seed=derive_seed(loop.seed, t, _SEED_SUBSAMPLE),
    )
    generator = torch.Generator().manual_seed(derive_seed(loop.seed, t, _SEED_LOADER))
    loader = task_loader(
        ds, batch_size=loop.batch_size, generator=generator, num_workers=loop.num_workers
    )

    params = [p for p in model.parameters() if p.requires_grad] + extra_params
    optimizer = make_optimizer(params, loop)
    scheduler = make_scheduler(optimizer, loop, epochs * len(loader))
    weight = strat.weight
    step = 0
    logger.info(
        "task_started",
        extra={
            "task": t,
            "dataset": task.dataset_name,
            "samples": len(ds),
            "epochs": epochs,
            "strategy": strat.name,
        },
    )

    for epoch in range(epochs):
        model.train()
        if strat.predictor is not None:
            strat.predictor.train()
        sums = {"base": 0.0, "penalty": 0.0, "total": 0.0}
        correct = seen = n_batches = 0

        for batch in loader:
            batch = batch.to(device)
            views = batch.views if objective.requires_two_views else batch.views[:1]
            encoded = [model.encode(v) for v in views]
            logits = local = class_weights = head_input = None
            if objective.ce_family:
                local = model.local_targets(t, batch.labels)
                head_input = model.head_input(encoded[0])
                if objective.name == "trex":
                    class_weights = model.heads[str(t)].weight
                else:
                    logits = model.head_logits(t, encoded[0])
            outputs = ViewOutputs(
                features=tuple(e.features for e in encoded),
                projected=tuple(e.projected for e in encoded),
                logits=logits,
                head_input=head_input,
            )
            base = objective_loss(
                objective, outputs, batch.labels, local_labels=local, class_weights=class_weights
            )
            # A zero weight skips the penalty so the step matches plain fine-tuning exactly.
            if weight > 0:
                penalty = strat.penalty(model, views, encoded, batch.labels)
                total = base + weight * penalty
            else:
                penalty = base.new_zeros(())
                total = base

            if not torch.isfinite(total):
                diagnostics = {
                    "task": t,
                    "epoch": epoch,
                    "step": step,
                    "base_loss": float(base.detach()),
                    "penalty": float(penalty.detach()),
                    "lr": scheduler.get_last_lr()[0],
                }
                logger.error("non_finite_loss", extra=diagnostics)
                log.flush()
                raise NonFiniteLossError(
                    f"non-finite loss at task {t}, step {step}", diagnostics=diagnostics
                )

            # scored with the weights that produced this step's loss
            if objective.ce_family:
                with torch.no_grad():
                    scores = model.heads[str(t)](head_input) if logits is None else logits
                    pred = scores.argmax(dim=1)
                    correct += int((pred == local).sum())
                    seen += int(local.numel())

            lr = scheduler.get_last_lr()[0]
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            scheduler.step()

            rec = TrainLogRecord(
                step=step,
                epoch=epoch,
                task=t,
                base_loss=float(base.detach()),
                penalty=float(penalty.detach()),
                total=float(total.detach()),
                lr=lr,
            )
            log.append(rec)
            records.append(rec)
            sums["base"] += rec.base_loss
            sums["penalty"] += rec.penalty
            sums["total"] += rec.total
            n_batches += 1
            step += 1

        log.flush()
        n = max(n_batches, 1)
        summary = EpochSummary(
            task=t,
            epoch=epoch,
            base_loss=sums["base"] / n,
            penalty=sums["penalty"] / n,
            total=sums["total"] / n,
            train_accuracy=correct / seen if seen else None,
        )
        summaries.append(summary)
        logger.info(
            "epoch_finished",
            extra={
                "task": t,
                "epoch": epoch,
                "base_loss": round(summary.base_loss, 6),
                "penalty": round(summary.penalty, 6),
                "train_accuracy": summary.train_accuracy,
            },
        )
        for hook in epoch_hooks:
            hook(summary)

    model.eval()
    return TrainTaskResult(
        model=model, snapshot=FrozenSnapshot(model, task_index=t), log=records, epochs=summaries
    )


@dataclass(frozen=True)
class BoundaryContext:
    """What an evaluation hook sees at the end of task `task_id`."""

    run_id: str
    seed: int
    task_id: int
    sequence: TaskSequence
    snapshot: FrozenSnapshot
    run_dir: Path
    config_hash: str

    def checkpoint(self, task_id: int) -> Path:
        return checkpoint_path(self.run_dir, task_id)


BoundaryHook = Callable[[BoundaryContext], BoundaryEvaluation]


@dataclass
class SequenceResult:
    run_id: str
    checkpoints: list[Path]
    report: MetricReport
    train_log: Path | None
    evaluations: list[BoundaryEvaluation]
    trained_tasks: list[int]
    wall_clock_s: dict[str, float] = field(default_factory=dict)


def run_sequence(
    sequence: TaskSequence,
    objective: ObjectiveConfig,
    strategy: StrategyConfig,
    loop: TrainLoopConfig,
    *,
    model: ContinualEncoder,
    store: DatasetStore,
    run_dir: str | Path,
    run_id: str,
    experiment: str | None = None,
    training_hash: str,
    config_hash: str,
    eval_hook: BoundaryHook | None = None,
    policy: AugmentationPolicy | None = None,
) -> SequenceResult:
    """Train task by task, checkpointing and evaluating at every boundary.

    Boundaries whose checkpoint and evaluation already exist under `run_dir` for the same
    configuration are reused instead of recomputed.
    """
    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    plan = build_resume_plan(
        run_path,
        sequence.n_tasks,
        run_id=run_id,
        seed=loop.seed,
        training_hash=training_hash,
        eval_hash=config_hash,
    )
    log = TrainLog(run_path / "train_log.jsonl")
    if plan.tasks_to_train:
        log.truncate_from(plan.tasks_to_train[0])

    strat = ContinualStrategy(strategy, objective)
    previous: FrozenSnapshot | None = None
    checkpoints: list[Path] = []
    evaluations: list[BoundaryEvaluation] = []
    clock: dict[str, float] = {}
    device = _device_of(model)

    for task in sequence.tasks:
        t = task.task_id
        ckpt = checkpoint_path(run_path, t)
        started = time.perf_counter()
        if t in plan.tasks_to_train:
            result = train_task(
                model,
                task,
                objective,
                strat,
                loop,
                store=store,
                previous=previous,
                log=log,
                policy=policy,
            )
            save_checkpoint(model, ckpt, task_index=t, seed=loop.seed, config_hash=training_hash)
            snap = result.snapshot
        else:
            load_into(model, ckpt)
            model.to(device).eval()
            snap = FrozenSnapshot(model, task_index=t)
            logger.info("boundary_reused", extra={"run_id": run_id, "task": t})
        clock[f"train_task{t}"] = time.perf_counter() - started
        checkpoints.append(ckpt)

        rec_path = eval_record_path(run_path, t)
        evaluation = None if t in plan.tasks_to_evaluate else read_eval_record(rec_path)
        if evaluation is None:
            started = time.perf_counter()
            if eval_hook is not None:
                ctx = BoundaryContext(
                    run_id=run_id,
                    seed=loop.seed,
                    task_id=t,
                    sequence=sequence,
                    snapshot=snap,
                    run_dir=run_path,
                    config_hash=config_hash,
                )
                evaluation = eval_hook(ctx)
            else:
                evaluation = BoundaryEvaluation(task_id=t, config_hash=config_hash)
            write_eval_record(rec_path, evaluation)
            clock[f"eval_task{t}"] = time.perf_counter() - started
        evaluations.append(evaluation)
        previous = snap

    report = MetricReport(
        experiment=experiment or run_id,
        sequence=sequence.notation,
        objective=objective.name,
        strategy=strategy.name,
        n_tasks=sequence.n_tasks,
        config_hash=config_hash,
        seeds=[loop.seed],
        records=[r for e in evaluations for r in e.records],
        spectra=[s for e in evaluations for s in e.spectra],
        flags=sorted({f for e in evaluations for f in e.flags}),
    )
    logger.info("sequence_finished", extra={"run_id": run_id, "trained_tasks": plan.tasks_to_train})
    return SequenceResult(
        run_id=run_id,
        checkpoints=checkpoints,
        report=report,
        train_log=log.path,
        evaluations=evaluations,
        trained_tasks=list(plan.tasks_to_train),
        wall_clock_s=clock,
    )
