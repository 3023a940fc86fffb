from __future__ import annotations

import json
import logging
import threading
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor, as_completed
from importlib import metadata
from pathlib import Path
from typing import Any

from . import __version__
from .boundary_eval import BoundaryEvaluator
from .config import ExperimentConfig, dump_config
from .datasets import DatasetStore
from .encoder import ContinualEncoder
from .errors import RunFailedError
from .models import RunManifest, SeedRunEntry
from .report import assemble_report, load_report, with_forgetting, write_report
from .training import run_sequence
from .utils import derive_seed, deterministic_algorithms, resolve_device, seeded, sha256_file

logger = logging.getLogger(__name__)

_SEED_INIT = 7


def code_version() -> str:
    try:
        return metadata.version("continual-repr")
    except metadata.PackageNotFoundError:
        return __version__


def experiment_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config.name


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.output_dir) / config.run_id(seed)


def make_store(config: ExperimentConfig) -> DatasetStore:
    return DatasetStore(config.dataset_root, download=config.download)


def build_model(config: ExperimentConfig, seed: int) -> ContinualEncoder:
    with seeded(derive_seed(seed, _SEED_INIT)):
        return ContinualEncoder(config.resolved_encoder(), config.projector, config.head)


def run_seed(
    config: ExperimentConfig, seed: int, *, store: DatasetStore | None = None
) -> SeedRunEntry:
    """Train and evaluate one seed, resuming from whatever its run directory already holds."""
    store = store or make_store(config)
    device = resolve_device(config.device)
    out = run_dir(config, seed)
    sequence = config.build_sequence()
    model = build_model(config, seed).to(device)
    evaluator = BoundaryEvaluator(
        store,
        config.resolved_eval(),
        cka_probe=config.cka_probe(),
        backbone_hash=config.training_hash(),
        device=device,
    )
    logger.info("seed_run_started", extra={"run_id": config.run_id(seed), "device": str(device)})
    with deterministic_algorithms():
        result = run_sequence(
            sequence,
            config.objective,
            config.strategy,
            config.resolved_loop(seed),
            model=model,
            store=store,
            run_dir=out,
            run_id=config.run_id(seed),
            experiment=config.name,
            training_hash=config.training_hash(),
            config_hash=config.config_hash(),
            eval_hook=evaluator,
        )
    report_path = write_report(with_forgetting(result.report), out / "report.json")
    return SeedRunEntry(
        run_id=config.run_id(seed),
        seed=seed,
        status="completed",
        checkpoints=[str(p.resolve()) for p in result.checkpoints],
        embedding_dumps=[
            str(Path(d).resolve()) for e in result.evaluations for d in e.embedding_dumps
        ],
        train_log=(
            str(result.train_log.resolve())
            if result.train_log and result.train_log.exists()
            else None
        ),
        report_path=str(report_path.resolve()),
        wall_clock_s=result.wall_clock_s,
    )


def _run_seed_job(config_data: dict[str, Any], seed: int) -> SeedRunEntry:
    # Process-pool entry point; configs cross the boundary as plain data.
    return run_seed(ExperimentConfig.model_validate(config_data), seed)


class SeedRunManager:
    """Tracks the per-seed runs of one experiment, in-process or across a process pool."""

    def __init__(self, config: ExperimentConfig, *, store: DatasetStore | None = None) -> None:
        self._config = config
        self._store = store
        self._entries: dict[int, SeedRunEntry] = {
            s: SeedRunEntry(run_id=config.run_id(s), seed=s) for s in config.seeds
        }
        self._lock = threading.Lock()

    def entries(self) -> list[SeedRunEntry]:
        with self._lock:
            return [self._entries[s].model_copy() for s in self._config.seeds]

    def _set(self, seed: int, entry: SeedRunEntry) -> None:
        with self._lock:
            self._entries[seed] = entry

    def _mark(self, seed: int, **changes: Any) -> None:
        with self._lock:
            self._entries[seed] = self._entries[seed].model_copy(update=changes)

    def failures(self) -> list[SeedRunEntry]:
        return [e for e in self.entries() if e.status == "failed"]

    def run_all(self, on_change: Callable[[], None] = lambda: None) -> None:
        workers = min(self._config.workers, len(self._config.seeds))
        if workers <= 1:
            for seed in self._config.seeds:
                self._mark(seed, status="running")
                on_change()
                try:
                    self._set(seed, run_seed(self._config, seed, store=self._store))
                except Exception as e:  # noqa: BLE001
                    logger.exception("seed_run_failed", extra={"seed": seed})
                    self._mark(seed, status="failed", error=f"{type(e).__name__}: {e}")
                on_change()
            return

        data = self._config.model_dump(mode="json")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_seed_job, data, s): s for s in self._config.seeds}
            for s in self._config.seeds:
                self._mark(s, status="running")
            on_change()
            for fut in as_completed(futures):
                seed = futures[fut]
                try:
                    self._set(seed, fut.result())
                except Exception as e:  # noqa: BLE001
                    logger.error("seed_run_failed", extra={"seed": seed, "error": str(e)})
                    self._mark(seed, status="failed", error=f"{type(e).__name__}: {e}")
                on_change()


def write_manifest(manifest: RunManifest, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".json.tmp")
    text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True)
    tmp.write_text(text + "\n", encoding="utf-8")
    tmp.replace(p)
    return p


def run(config: ExperimentConfig, *, store: DatasetStore | None = None) -> RunManifest:
    """Run every seed of `config` and write the experiment manifest and aggregated report.

    On failure the manifest is still written with whatever completed, and RunFailedError points
    at it.
    """
    exp_dir = experiment_dir(config)
    exp_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, exp_dir / "config.yaml")
    manifest_path = exp_dir / "manifest.json"
    manifest = RunManifest(
        experiment=config.name,
        code_version=code_version(),
        config=config.model_dump(mode="json"),
        config_hash=config.config_hash(),
    )
    manager = SeedRunManager(config, store=store)

    def save() -> None:
        nonlocal manifest
        manifest = manifest.model_copy(update={"runs": manager.entries()})
        write_manifest(manifest, manifest_path)

    logger.info("experiment_started", extra={"experiment": config.name, "seeds": config.seeds})
    manager.run_all(on_change=save)

    failed = manager.failures()
    if failed:
        manifest = manifest.model_copy(
            update={
                "status": "failed",
                "runs": manager.entries(),
                "error": "; ".join(f"{e.run_id}: {e.error}" for e in failed),
            }
        )
        write_manifest(manifest, manifest_path)
        raise RunFailedError(
            f"{len(failed)} of {len(config.seeds)} seed runs failed; "
            f"partial manifest at {manifest_path}",
            manifest_path=str(manifest_path),
        )

    entries = manager.entries()
    seed_reports = [load_report(e.report_path) for e in entries if e.report_path]
    report = assemble_report(seed_reports, experiment=config.name)
    report_path = write_report(report, exp_dir / "report.json")
    manifest = manifest.model_copy(
        update={"status": "completed", "runs": entries, "report_path": str(report_path.resolve())}
    )
    digests = {p: sha256_file(p) for p in manifest.artifact_paths()}
    manifest = manifest.model_copy(update={"digests": digests})
    write_manifest(manifest, manifest_path)
    logger.info(
        "experiment_finished",
        extra={"experiment": config.name, "manifest": str(manifest_path)},
    )
    return manifest
