import json
from pathlib import Path

import pytest
import yaml

from continual_repr.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main, parse_overrides
from continual_repr.errors import ConfigFileError
from continual_repr.report import load_report

from .conftest import toy_config_data


def _config_file(tmp_path: Path, **overrides) -> Path:
    path = tmp_path / "toy.yaml"
    path.write_text(yaml.safe_dump(toy_config_data(tmp_path, **overrides)), encoding="utf-8")
    return path


def test_parse_overrides() -> None:
    parsed = parse_overrides(["loop.lr=0.01", "seeds=[1, 2]", "strategy.name=pfr", "name=x=y"])
    assert parsed == {
        "loop": {"lr": 0.01},
        "seeds": [1, 2],
        "strategy": {"name": "pfr"},
        "name": "x=y",
    }
    with pytest.raises(ConfigFileError):
        parse_overrides(["no-equals-sign"])


def test_validate_prints_resolved_config(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    code = main(["validate", str(_config_file(tmp_path)), "--seeds", "3", "4"])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["sequence"] == "TOY4/2"
    assert out["n_tasks"] == 2
    assert out["seeds"] == [3, 4]
    assert (out["objective"], out["strategy"]) == ("sl", "finetune")


def test_validate_from_flags_only(capsys: pytest.CaptureFixture) -> None:
    code = main(
        ["validate", "--name", "c", "--sequence", "C10->SVHN", "--set", "objective=simclr"]
    )
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().out)["n_tasks"] == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["--set", "objective=barlow", "--set", "strategy=lwf", "--sequence", "C100/5"],
        ["--set", "objective=sl", "--sequence", "C10/3"],
        ["--set", "objective=sl", "--sequence", "MNIST/2"],
        ["missing.yaml"],
        ["--sequence", "C10/2", "--set", "broken"],
    ],
)
def test_invalid_configs_exit_with_validation_code(argv: list[str]) -> None:
    assert main(["validate", "--name", "c", *argv]) == EXIT_VALIDATION


def test_missing_manifest_is_a_runtime_error(tmp_path: Path) -> None:
    code = main(["figures", str(tmp_path / "nowhere"), "--out", str(tmp_path / "figs")])
    assert code == EXIT_RUNTIME


def test_run_then_report_commands(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config = _config_file(tmp_path)
    assert main(["run", str(config)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "final task-agnostic k-NN" in out
    exp_dir = tmp_path / "runs" / "toy"
    assert (exp_dir / "manifest.json").exists()

    table = tmp_path / "table.md"
    assert main(["table", str(exp_dir), "--out", str(table)]) == EXIT_OK
    assert "| SL | Finetune |" in table.read_text(encoding="utf-8")

    figs = tmp_path / "figs"
    assert main(["figures", str(exp_dir), "--out", str(figs), "--kind", "knn"]) == EXIT_OK
    assert (figs / "knn_accumulation.png").exists()

    comparison = tmp_path / "comparison.json"
    code = main(
        [
            "eval",
            str(exp_dir),
            "--reference",
            str(exp_dir),
            "--relation",
            "exclusion",
            "--probe",
            "TOY4",
            "--device",
            "cpu",
            "--out",
            str(comparison),
        ]
    )
    assert code == EXIT_OK
    data = json.loads(comparison.read_text(encoding="utf-8"))
    by_metric = {r["metric"]: r["value"] for r in data["records"]}
    assert by_metric["exclusion_difference"] == 0.0
    assert by_metric["cka"] == pytest.approx(1.0, abs=1e-6)
    assert load_report(exp_dir / "report.json").seeds == [0]


def test_table_skips_incomplete_runs(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert main(["table", str(tmp_path / "absent")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("| Method | CL strategy |")
