from __future__ import annotations

import json
import logging
from pathlib import Path

from .encoder import read_checkpoint_meta
from .errors import CheckpointError
from .models import BoundaryEvaluation, BoundaryState, ResumePlan

logger = logging.getLogger(__name__)


def checkpoint_path(run_dir: str | Path, task_id: int) -> Path:
    return Path(run_dir) / f"task{task_id}.ckpt"


def eval_record_path(run_dir: str | Path, task_id: int) -> Path:
    return Path(run_dir) / f"eval_task{task_id}.json"


def read_eval_record(path: str | Path) -> BoundaryEvaluation | None:
    p = Path(path)
    if not p.exists():
        return None
    try:
        return BoundaryEvaluation.model_validate(json.loads(p.read_text(encoding="utf-8")))
    except Exception:  # noqa: BLE001
        logger.warning("eval_record_unreadable", extra={"path": str(p)})
        return None


def write_eval_record(path: str | Path, record: BoundaryEvaluation) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".json.tmp")
    text = json.dumps(record.model_dump(mode="json"), indent=2, sort_keys=True)
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(p)
    return p


def compute_run_state(
    run_dir: str | Path,
    n_tasks: int,
    *,
    seed: int,
    training_hash: str,
    eval_hash: str,
) -> list[BoundaryState]:
    """Status of every boundary of one run directory.

    A boundary is `trained` when its checkpoint matches the training identity, `evaluated` when a
    matching evaluation record exists as well. Anything downstream of a boundary that has to be
    retrained is `stale`.
    """
    states: list[BoundaryState] = []
    retrain_from: int | None = None

    for t in range(n_tasks):
        ckpt = checkpoint_path(run_dir, t)
        rec_path = eval_record_path(run_dir, t)
        reasons: list[str] = []

        if retrain_from is not None:
            states.append(
                BoundaryState(
                    task_id=t,
                    status="stale",
                    checkpoint=str(ckpt) if ckpt.exists() else None,
                    reasons=[f"depends_on_retrained:{retrain_from}"],
                )
            )
            continue

        if not ckpt.exists():
            states.append(BoundaryState(task_id=t, status="missing", reasons=["no_checkpoint"]))
            retrain_from = t
            continue

        try:
            meta = read_checkpoint_meta(ckpt)
        except CheckpointError:
            states.append(
                BoundaryState(
                    task_id=t,
                    status="missing",
                    checkpoint=str(ckpt),
                    reasons=["unreadable_checkpoint"],
                )
            )
            retrain_from = t
            continue

        if meta.config_hash != training_hash:
            reasons.append("training_config_changed")
        if meta.seed != seed:
            reasons.append("seed_changed")
        if meta.task_index != t:
            reasons.append("task_index_mismatch")
        if reasons:
            states.append(
                BoundaryState(task_id=t, status="stale", checkpoint=str(ckpt), reasons=reasons)
            )
            retrain_from = t
            continue

        record = read_eval_record(rec_path)
        if record is not None and record.config_hash == eval_hash and record.task_id == t:
            states.append(
                BoundaryState(
                    task_id=t,
                    status="evaluated",
                    checkpoint=str(ckpt),
                    eval_record=str(rec_path),
                )
            )
        else:
            why = "no_eval_record" if record is None else "eval_config_changed"
            states.append(
                BoundaryState(task_id=t, status="trained", checkpoint=str(ckpt), reasons=[why])
            )

    return states


def build_resume_plan(
    run_dir: str | Path,
    n_tasks: int,
    *,
    run_id: str,
    seed: int,
    training_hash: str,
    eval_hash: str,
) -> ResumePlan:
    states = compute_run_state(
        run_dir, n_tasks, seed=seed, training_hash=training_hash, eval_hash=eval_hash
    )
    to_train = [s.task_id for s in states if s.status in {"missing", "stale"}]
    to_eval = [s.task_id for s in states if s.status != "evaluated"]
    if to_train and to_train[0] > 0:
        logger.info("resume_from_boundary", extra={"run_id": run_id, "first_task": to_train[0]})
    return ResumePlan(
        run_id=run_id, boundaries=states, tasks_to_train=to_train, tasks_to_evaluate=to_eval
    )
