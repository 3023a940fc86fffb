from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, Field

from .boundary_eval import CKA_SEED, REFERENCE_SEED, cap_rows
from .config import EvalOptions
from .datasets import DatasetStore, subsample_per_class
from .encoder import load_snapshot
from .errors import ManifestIntegrityError, MissingMetricError, MissingRunError
from .evaluation import (
    EmbeddingMatrix,
    exclusion_difference,
    extract_embeddings,
    forgetting,
    forward_transfer,
    knn_accuracy,
    linear_cka,
)
from .models import (
    AggregateRecord,
    ComparisonRelation,
    ComparisonReport,
    MetricRecord,
    MetricReport,
    RunManifest,
)
from .task_stream import eval_policy
from .utils import sha256_file

logger = logging.getLogger(__name__)

FINAL_KNN = "knn_task_agnostic"

# Input names each derived metric stores, in (first, second) order.
DERIVED_INPUTS: dict[str, tuple[str, str]] = {
    "forgetting": ("acc_after_own_task", "acc_after_final"),
    "forward_transfer": ("acc_pretrained", "acc_scratch"),
    "exclusion_difference": ("acc_with_task", "acc_without_task"),
}
_DERIVED_FN = {
    "forgetting": forgetting,
    "forward_transfer": forward_transfer,
    "exclusion_difference": exclusion_difference,
}


def forgetting_records(report: MetricReport) -> list[MetricRecord]:
    """F for every task but the last, per seed, from the stored task-aware accuracies."""
    final = report.n_tasks - 1
    out: list[MetricRecord] = []
    for seed in report.seeds:
        for task in range(final):
            own = report.select("knn_task_aware", seed=seed, boundary=task, task_id=task)
            last = report.select("knn_task_aware", seed=seed, boundary=final, task_id=task)
            if not own or not last:
                continue
            a, b = own[0].value, last[0].value
            out.append(
                MetricRecord(
                    metric="forgetting",
                    value=forgetting(a, b),
                    seed=seed,
                    boundary=final,
                    task_id=task,
                    probe=own[0].probe,
                    inputs={"acc_after_own_task": a, "acc_after_final": b},
                )
            )
    return out


def with_forgetting(report: MetricReport) -> MetricReport:
    kept = [r for r in report.records if r.metric != "forgetting"]
    base = report.model_copy(update={"records": kept})
    return base.model_copy(update={"records": base.records + forgetting_records(base)})


def _key(r: MetricRecord | AggregateRecord) -> tuple:
    boundary = -1 if r.boundary is None else r.boundary
    task = -1 if r.task_id is None else r.task_id
    return (r.metric, boundary, task, r.probe)


def aggregate_records(records: Iterable[MetricRecord]) -> list[AggregateRecord]:
    """Mean and sample standard deviation across seeds (0 for a single value)."""
    groups: dict[tuple, list[MetricRecord]] = defaultdict(list)
    for r in records:
        groups[_key(r)].append(r)
    out: list[AggregateRecord] = []
    for key in sorted(groups):
        rs = groups[key]
        values = np.asarray([r.value for r in rs], dtype=np.float64)
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        first = rs[0]
        out.append(
            AggregateRecord(
                metric=first.metric,
                boundary=first.boundary,
                task_id=first.task_id,
                probe=first.probe,
                mean=float(values.mean()),
                std=std,
                n=int(values.size),
                values=values.tolist(),
            )
        )
    return out


def assemble_report(seed_reports: Sequence[MetricReport], *, experiment: str) -> MetricReport:
    """Merge per-seed reports into one report with seed aggregates."""
    if not seed_reports:
        raise MissingRunError("no seed reports to assemble")
    first = seed_reports[0]
    records = [r for rep in seed_reports for r in rep.records]
    spectra = [s for rep in seed_reports for s in rep.spectra]
    merged = MetricReport(
        experiment=experiment,
        sequence=first.sequence,
        objective=first.objective,
        strategy=first.strategy,
        n_tasks=first.n_tasks,
        config_hash=first.config_hash,
        seeds=[s for rep in seed_reports for s in rep.seeds],
        records=records,
        spectra=spectra,
        flags=sorted({f for rep in seed_reports for f in rep.flags}),
    )
    return merged.model_copy(update={"aggregates": aggregate_records(records)})


def verify_report_identities(report: MetricReport) -> list[str]:
    """Problems found when re-deriving F/FT/EXC from their stored inputs (empty when consistent)."""
    problems: list[str] = []
    for r in report.records:
        names = DERIVED_INPUTS.get(r.metric)
        if names is None:
            continue
        if any(n not in r.inputs for n in names):
            problems.append(f"{r.metric}@{r.boundary}/{r.task_id}: missing inputs")
            continue
        expected = _DERIVED_FN[r.metric](r.inputs[names[0]], r.inputs[names[1]])
        if expected != r.value:
            problems.append(f"{r.metric}@{r.boundary}/{r.task_id}: {r.value} != {expected}")
        if r.metric == "forgetting":
            own = report.select(
                "knn_task_aware", seed=r.seed, boundary=r.task_id, task_id=r.task_id
            )
            last = report.select(
                "knn_task_aware", seed=r.seed, boundary=r.boundary, task_id=r.task_id
            )
            if own and own[0].value != r.inputs[names[0]]:
                problems.append(f"forgetting@{r.task_id}: stale acc_after_own_task")
            if last and last[0].value != r.inputs[names[1]]:
                problems.append(f"forgetting@{r.task_id}: stale acc_after_final")
    return problems


def report_json(report: BaseModel) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def write_report(report: BaseModel, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".json.tmp")
    tmp.write_text(report_json(report), encoding="utf-8")
    tmp.replace(p)
    return p


def load_report(path: str | Path) -> MetricReport:
    p = Path(path)
    if not p.exists():
        raise MissingRunError(f"Report not found: {path}")
    return MetricReport.model_validate(json.loads(p.read_text(encoding="utf-8")))


def load_manifest(path: str | Path) -> RunManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise MissingRunError(f"Manifest not found: {path}")
    return RunManifest.model_validate(json.loads(p.read_text(encoding="utf-8")))


def verify_manifest(manifest: RunManifest) -> None:
    """Raise ManifestIntegrityError unless every artifact exists with its recorded digest."""
    for path in manifest.artifact_paths():
        if not Path(path).exists():
            raise ManifestIntegrityError(f"missing artifact: {path}")
        recorded = manifest.digests.get(path)
        if recorded is None:
            raise ManifestIntegrityError(f"no digest recorded for {path}")
        if sha256_file(path) != recorded:
            raise ManifestIntegrityError(f"digest mismatch for {path}")


def report_of(manifest: RunManifest) -> MetricReport:
    if manifest.status != "completed" or manifest.report_path is None:
        raise MissingRunError(f"run {manifest.experiment} did not complete")
    return load_report(manifest.report_path)


def final_value(report: MetricReport, metric: str = FINAL_KNN) -> AggregateRecord:
    agg = report.aggregate(metric, boundary=report.n_tasks - 1)
    if agg is None:
        raise MissingMetricError(f"{report.experiment} has no {metric} at the final boundary")
    return agg


# --- cross-run comparison -------------------------------------------------


def _probe_embeddings(
    checkpoint: str,
    probe: str,
    store: DatasetStore,
    options: EvalOptions,
    device: torch.device | None,
) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
    snap = load_snapshot(checkpoint)
    if device is not None:
        snap = snap.to(device)
    policy = eval_policy(probe)
    train = store.get(probe, "train")
    if options.max_reference_per_class is not None:
        train = subsample_per_class(train, options.max_reference_per_class, seed=REFERENCE_SEED)
    test = cap_rows(store.get(probe, "test"), options.cka_max_samples, seed=CKA_SEED)
    kw = {"batch_size": options.eval_batch_size, "device": device}
    return (
        extract_embeddings(snap, train, policy, **kw),
        extract_embeddings(snap, test, policy, **kw),
    )


def compare_runs(
    run: RunManifest,
    reference: RunManifest,
    *,
    relation: ComparisonRelation,
    probe: str,
    store: DatasetStore,
    options: EvalOptions | None = None,
    device: torch.device | None = None,
) -> ComparisonReport:
    """Probe accuracy of both final models, their CKA, and EXC or FT between them.

    `exclusion`: the run contains the probe task, the reference does not. `transfer`: the run was
    pretrained on another task first, the reference trained on the probe from scratch. Seeds are
    paired in order.
    """
    options = options or EvalOptions()
    for m in (run, reference):
        if m.status != "completed":
            raise MissingRunError(f"run {m.experiment} did not complete")
    pairs = list(zip(run.runs, reference.runs, strict=False))
    if not pairs:
        raise MissingRunError("no seed runs to compare")

    records: list[MetricRecord] = []
    for mine, theirs in pairs:
        if not mine.checkpoints or not theirs.checkpoints:
            raise MissingRunError(f"{mine.run_id} or {theirs.run_id} has no checkpoints")
        train_a, test_a = _probe_embeddings(mine.checkpoints[-1], probe, store, options, device)
        train_b, test_b = _probe_embeddings(theirs.checkpoints[-1], probe, store, options, device)
        acc_a = 100.0 * knn_accuracy(train_a, test_a, options.k, options.knn_temperature)
        acc_b = 100.0 * knn_accuracy(train_b, test_b, options.k, options.knn_temperature)
        seed = mine.seed
        records += [
            MetricRecord(metric="probe_accuracy_run", value=acc_a, seed=seed, probe=probe),
            MetricRecord(metric="probe_accuracy_reference", value=acc_b, seed=seed, probe=probe),
            MetricRecord(
                metric="cka",
                value=linear_cka(test_a.features, test_b.features),
                seed=seed,
                probe=probe,
            ),
        ]
        if relation == "exclusion":
            records.append(
                MetricRecord(
                    metric="exclusion_difference",
                    value=exclusion_difference(acc_a, acc_b),
                    seed=seed,
                    probe=probe,
                    inputs={"acc_with_task": acc_a, "acc_without_task": acc_b},
                )
            )
        elif relation == "transfer":
            records.append(
                MetricRecord(
                    metric="forward_transfer",
                    value=forward_transfer(acc_a, acc_b),
                    seed=seed,
                    probe=probe,
                    inputs={"acc_pretrained": acc_a, "acc_scratch": acc_b},
                )
            )
        logger.info(
            "runs_compared",
            extra={"run": mine.run_id, "reference": theirs.run_id, "probe": probe},
        )

    return ComparisonReport(
        run=run.experiment,
        reference=reference.experiment,
        relation=relation,
        probe=probe,
        records=records,
        aggregates=aggregate_records(records),
    )


# --- tables ---------------------------------------------------------------

OBJECTIVE_LABELS = {
    "sl": "SL",
    "sl_mlp": "SL+MLP",
    "trex": "t-ReX",
    "supcon": "SupCon",
    "barlow": "BarlowTwins",
    "simclr": "SimCLR",
}
STRATEGY_LABELS = {"finetune": "Finetune", "lwf": "LwF", "cassle": "CaSSLe", "pfr": "PFR"}


class TableRow(BaseModel):
    objective: str
    strategy: str
    group: str = ""


class TableSchema(BaseModel):
    rows: list[TableRow]
    columns: list[str] = Field(description="Sequence notations")
    metric: str = FINAL_KNN


def table1_schema() -> TableSchema:
    """Method x strategy rows over C100/5, C100/20 and IN100/5; ranked within supervision groups."""
    plan = [
        ("sl", ("finetune", "lwf", "pfr"), "supervised"),
        ("sl_mlp", ("finetune", "lwf", "pfr"), "supervised"),
        ("trex", ("finetune", "lwf", "pfr"), "supervised"),
        ("supcon", ("finetune", "cassle", "pfr"), "supervised"),
        ("barlow", ("finetune", "cassle", "pfr"), "unsupervised"),
        ("simclr", ("finetune", "cassle", "pfr"), "unsupervised"),
    ]
    rows = [
        TableRow(objective=o, strategy=s, group=g) for o, strategies, g in plan for s in strategies
    ]
    return TableSchema(rows=rows, columns=["C100/5", "C100/20", "IN100/5"])


TABLE1_ROWS = len(table1_schema().rows)


def _cell_values(
    reports: Sequence[MetricReport], schema: TableSchema
) -> dict[tuple[int, str], AggregateRecord]:
    cells: dict[tuple[int, str], AggregateRecord] = {}
    for i, row in enumerate(schema.rows):
        for col in schema.columns:
            for rep in reports:
                wanted = (row.objective, row.strategy, col)
                if (rep.objective, rep.strategy, rep.sequence) != wanted:
                    continue
                try:
                    cells[(i, col)] = final_value(rep, schema.metric)
                except MissingMetricError:
                    logger.warning(
                        "table_cell_missing_metric", extra={"experiment": rep.experiment}
                    )
                break
    return cells


def table_report(reports: Sequence[MetricReport], schema: TableSchema | None = None) -> str:
    """Markdown table of final mean±std; best per column in bold, second best in italics.

    Ranking uses the one-decimal display value, so displayed ties are all bold. Cells without a
    completed run stay blank.
    """
    if schema is None:
        seen_rows: list[TableRow] = []
        for rep in reports:
            row = TableRow(objective=rep.objective, strategy=rep.strategy)
            if row not in seen_rows:
                seen_rows.append(row)
        columns = sorted({rep.sequence for rep in reports})
        schema = TableSchema(rows=seen_rows, columns=columns)

    cells = _cell_values(reports, schema)
    emphasis: dict[tuple[int, str], str] = {}
    groups = sorted({r.group for r in schema.rows})
    for col in schema.columns:
        for group in groups:
            shown = {
                i: round(cells[(i, col)].mean, 1)
                for i, r in enumerate(schema.rows)
                if r.group == group and (i, col) in cells
            }
            ranked = sorted(set(shown.values()), reverse=True)
            for i, v in shown.items():
                if v == ranked[0]:
                    emphasis[(i, col)] = "best"
                elif len(ranked) > 1 and v == ranked[1]:
                    emphasis[(i, col)] = "second"

    lines = [
        "| Method | CL strategy | " + " | ".join(schema.columns) + " |",
        "|---|---|" + "---|" * len(schema.columns),
    ]
    previous_objective = None
    for i, row in enumerate(schema.rows):
        label = OBJECTIVE_LABELS.get(row.objective, row.objective)
        method = label if row.objective != previous_objective else ""
        previous_objective = row.objective
        out = []
        for col in schema.columns:
            agg = cells.get((i, col))
            if agg is None:
                out.append("")
                continue
            text = f"{agg.mean:.1f}±{agg.std:.1f}"
            mark = emphasis.get((i, col))
            if mark == "best":
                text = f"**{text}**"
            elif mark == "second":
                text = f"*{text}*"
            out.append(text)
        strategy = STRATEGY_LABELS.get(row.strategy, row.strategy)
        lines.append(f"| {method} | {strategy} | " + " | ".join(out) + " |")
    return "\n".join(lines) + "\n"
