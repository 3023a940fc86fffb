from __future__ import annotations

import logging
import threading
from pathlib import Path

import torch

from .config import EvalOptions
from .datasets import DatasetStore, ImageSet, subsample_per_class
from .embedding_io import dump_path, save_embeddings
from .encoder import ContinualEncoder, FrozenSnapshot, load_snapshot
from .evaluation import (
    EmbeddingMatrix,
    extract_embeddings,
    linear_cka,
    nmc_stability,
    spectrum,
    task_agnostic_knn,
    task_aware_knn,
)
from .models import (
    BoundaryEvaluation,
    EmbeddingSource,
    MetricRecord,
    Split,
    SpectrumEntry,
    TaskSequence,
)
from .task_stream import eval_policy
from .training import BoundaryContext

logger = logging.getLogger(__name__)

REFERENCE_SEED = 20_231
CKA_SEED = 10_000


def percent(fraction: float) -> float:
    return 100.0 * fraction


def cap_rows(data: ImageSet, max_rows: int, *, seed: int) -> ImageSet:
    """At most `max_rows` samples, chosen by a fixed seed and kept in original order."""
    if len(data) <= max_rows:
        return data
    g = torch.Generator().manual_seed(seed)
    index, _ = torch.sort(torch.randperm(len(data), generator=g)[:max_rows])
    return data.subset(index)


class BoundaryEvaluator:
    """Evaluation hook run after every task: k-NN, spectra, CKA and NMC against boundary 0."""

    def __init__(
        self,
        store: DatasetStore,
        options: EvalOptions,
        *,
        cka_probe: str,
        backbone_hash: str,
        device: torch.device | None = None,
    ) -> None:
        self.store = store
        self.options = options
        self.cka_probe = cka_probe
        self.backbone_hash = backbone_hash
        self.device = device
        self._first: dict[Path, FrozenSnapshot] = {}
        self._lock = threading.Lock()

    def _data(self, sequence: TaskSequence, dataset: str, split: Split) -> ImageSet:
        offset = sequence.label_offsets()[dataset]
        data = self.store.get(dataset, split)
        cap = self.options.max_reference_per_class
        if split == "train" and cap is not None:
            data = subsample_per_class(data, cap, seed=REFERENCE_SEED)
        return ImageSet(images=data.images, labels=data.labels + offset)

    def _embed(
        self,
        state: ContinualEncoder | FrozenSnapshot,
        data: ImageSet,
        dataset: str,
        source: EmbeddingSource | None,
    ) -> EmbeddingMatrix:
        return extract_embeddings(
            state,
            data,
            eval_policy(dataset),
            batch_size=self.options.eval_batch_size,
            device=self.device,
            source=source,
        )

    def _first_snapshot(self, ctx: BoundaryContext) -> FrozenSnapshot:
        if ctx.task_id == 0:
            return ctx.snapshot
        with self._lock:
            snap = self._first.get(ctx.run_dir)
            if snap is None:
                snap = load_snapshot(ctx.checkpoint(0)).to(ctx.snapshot.device)
                self._first[ctx.run_dir] = snap
        return snap

    def __call__(self, ctx: BoundaryContext) -> BoundaryEvaluation:
        opts = self.options
        seq = ctx.sequence
        t = ctx.task_id
        records: list[MetricRecord] = []
        spectra: list[SpectrumEntry] = []
        dumps: list[str] = []
        flags: list[str] = []

        per_split: dict[Split, list[EmbeddingMatrix]] = {"train": [], "test": []}
        for dataset in seq.datasets():
            for split in ("train", "test"):
                source = EmbeddingSource(
                    run_id=ctx.run_id, boundary=t, split=split, dataset=dataset
                )
                emb = self._embed(ctx.snapshot, self._data(seq, dataset, split), dataset, source)
                per_split[split].append(emb)
                if opts.dump_embeddings and split in opts.dump_splits:
                    path = dump_path(ctx.run_dir, t, dataset, split)
                    p = save_embeddings(emb, path, backbone_hash=self.backbone_hash)
                    dumps.append(str(p))

        full: dict[Split, EmbeddingMatrix] = {
            split: EmbeddingMatrix(
                torch.cat([m.features for m in mats]),
                torch.cat([m.labels for m in mats]),
                EmbeddingSource(run_id=ctx.run_id, boundary=t, split=split),
            )
            for split, mats in per_split.items()
        }

        acc = task_agnostic_knn(full["train"], full["test"], opts.k, opts.knn_temperature)
        records.append(
            MetricRecord(metric="knn_task_agnostic", value=percent(acc), seed=ctx.seed, boundary=t)
        )
        for task in seq.tasks:
            acc = task_aware_knn(
                full["train"], full["test"], task.class_ids, opts.k, opts.knn_temperature
            )
            records.append(
                MetricRecord(
                    metric="knn_task_aware",
                    value=percent(acc),
                    seed=ctx.seed,
                    boundary=t,
                    task_id=task.task_id,
                    probe=task.dataset_name,
                )
            )

        spectra.append(
            SpectrumEntry(
                seed=ctx.seed,
                boundary=t,
                probe="sequence",
                split=opts.spectra_split,
                spectrum=spectrum(full[opts.spectra_split]),
            )
        )

        if t >= 1:
            first = self._first_snapshot(ctx)
            records.append(self._cka_record(ctx, first))
            nmc_records, violated = self._nmc_records(ctx, first)
            records.extend(nmc_records)
            if violated:
                flags.append(f"nmc_ordering_violation@{t}")

        logger.info(
            "boundary_evaluated",
            extra={
                "run_id": ctx.run_id,
                "task": t,
                "knn_task_agnostic": round(records[0].value, 2),
            },
        )
        return BoundaryEvaluation(
            task_id=t,
            config_hash=ctx.config_hash,
            records=records,
            spectra=spectra,
            embedding_dumps=dumps,
            flags=flags,
        )

    def _cka_record(self, ctx: BoundaryContext, first: FrozenSnapshot) -> MetricRecord:
        probe = self.cka_probe
        data = self._data(ctx.sequence, probe, "test")
        data = cap_rows(data, self.options.cka_max_samples, seed=CKA_SEED)
        x = self._embed(first, data, probe, None).features
        y = self._embed(ctx.snapshot, data, probe, None).features
        return MetricRecord(
            metric="cka_first",
            value=linear_cka(x, y),
            seed=ctx.seed,
            boundary=ctx.task_id,
            probe=probe,
            inputs={"n": float(x.shape[0])},
        )

    def _nmc_records(
        self, ctx: BoundaryContext, first: FrozenSnapshot
    ) -> tuple[list[MetricRecord], bool]:
        task0 = ctx.sequence.tasks[0]
        dataset = task0.dataset_name
        wanted = torch.as_tensor(task0.class_ids, dtype=torch.int64)

        def task0_data(split: Split) -> ImageSet:
            data = self._data(ctx.sequence, dataset, split)
            return data.subset(torch.nonzero(torch.isin(data.labels, wanted)).flatten())

        train, test = task0_data("train"), task0_data("test")
        result = nmc_stability(
            self._embed(first, train, dataset, None),
            self._embed(first, test, dataset, None),
            self._embed(ctx.snapshot, train, dataset, None),
            self._embed(ctx.snapshot, test, dataset, None),
        )
        common = {"seed": ctx.seed, "boundary": ctx.task_id, "task_id": 0, "probe": dataset}
        records = [
            MetricRecord(metric="nmc_after_first", value=percent(result.after_first), **common),
            MetricRecord(metric="nmc_stale", value=percent(result.stale), **common),
            MetricRecord(metric="nmc_upper", value=percent(result.upper), **common),
            MetricRecord(metric="nmc_chance", value=100.0 / len(task0.class_ids), **common),
        ]
        return records, result.ordering_violated
