import csv
import json
import logging

import pytest
import yaml

from hiscale.cli import EXIT_INCOMPLETE, EXIT_INVALID, EXIT_OK, grid_points, main
from hiscale.config import load_config, with_overrides

TINY = {
    "name": "tiny", "seed": 4, "horizon": 400, "warmup": 0,
    "profiles": {"small": {"preset": "small"}},
    "workload": [{"model_id": "small", "cls": "interactive", "arrival": {"mean_rate": 1.0, "duration": 60}}],
    "initial": [{"model_id": "small", "mixed": 1}],
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_simulate_writes_artifacts(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "-c", str(tiny), "-o", str(out)]) == EXIT_OK
    for name in ("records.csv", "timeline.csv", "actions.csv", "estimates.csv", "summary.json", "config.yaml"):
        assert (out / name).is_file()
    assert json.loads((out / "summary.json").read_text())["scenario"] == "tiny"
    assert "combined_attainment" in capsys.readouterr().out


def test_simulate_default_output_root(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("HISCALE_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["simulate", "-c", str(tiny), "--seed", "9"]) == EXIT_OK
    assert (tmp_path / "root" / "tiny-seed9" / "summary.json").is_file()


def test_simulate_is_byte_reproducible(tiny, tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "-c", str(tiny), "-o", str(tmp_path / d)]) == EXIT_OK
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_unknown_key_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**TINY, "horizn": 5}))
    assert main(["simulate", "-c", str(bad)]) == EXIT_INVALID
    assert "horizn" in capsys.readouterr().err


def test_incomplete_exit_code(tmp_path):
    path = tmp_path / "short.yaml"
    doc = {**TINY, "horizon": 5, "autoscaler": {"kind": "static"},
           "workload": [{"model_id": "small", "cls": "batch", "arrival": {"mean_rate": 5.0, "duration": 4}}]}
    path.write_text(yaml.safe_dump(doc))
    assert main(["simulate", "-c", str(path), "-o", str(tmp_path / "o")]) == EXIT_INCOMPLETE
    assert (tmp_path / "o" / "summary.json").is_file()


def test_sweep_rows_and_hashes(tiny, tmp_path):
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"workload.0.arrival.mean_rate": [0.5, 1.0, 2.0]}))
    out = tmp_path / "sweep"
    assert main(["sweep", "-c", str(tiny), "-g", str(grid), "-o", str(out)]) == EXIT_OK
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    base = load_config(tiny)
    for i, row in enumerate(rows):
        point = {"workload.0.arrival.mean_rate": float(row["workload.0.arrival.mean_rate"]), "seed": base.seed + i}
        assert row["config_hash"] == with_overrides(base, point).config_hash()
        assert int(row["seed"]) == base.seed + i


def test_sweep_same_seed_and_parallel(tiny, tmp_path):
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"autoscaler.theta": [0.3, 0.4]}))
    out = tmp_path / "sweep"
    assert main(["sweep", "-c", str(tiny), "-g", str(grid), "-o", str(out), "-j", "2", "--same-seed"]) == EXIT_OK
    with open(out / "sweep.csv", newline="") as fh:
        assert {r["seed"] for r in csv.DictReader(fh)} == {"4"}


def test_grid_dedup_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="hiscale"):
        points = grid_points({"a": [1, 1, 2], "b": ["x"]})
    assert points == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]
    assert "duplicate" in caplog.text


def test_empty_grid_is_invalid(tiny, tmp_path):
    grid = tmp_path / "grid.yaml"
    grid.write_text("{}\n")
    assert main(["sweep", "-c", str(tiny), "-g", str(grid)]) == EXIT_INVALID
    grid.write_text(yaml.safe_dump({"autoscaler.theta": []}))
    assert main(["sweep", "-c", str(tiny), "-g", str(grid)]) == EXIT_INVALID


def test_report_run_and_sweep(tiny, tmp_path, capsys):
    run_dir = tmp_path / "run"
    main(["simulate", "-c", str(tiny), "-o", str(run_dir)])
    capsys.readouterr()
    assert main(["report", str(run_dir)]) == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert len([line for line in table if line.strip().startswith("tiny")]) == 1
    with open(run_dir / "plotdata.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["metric", "x", "y", "series"]

    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"autoscaler.theta": [0.4, 0.2, 0.3, 0.25, 0.35]}))
    main(["sweep", "-c", str(tiny), "-g", str(grid), "-o", str(tmp_path / "sw")])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "sw")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    keys = [float(line.split()[0]) for line in lines[1:6]]
    assert keys == sorted(keys) and len(keys) == 5


def test_report_errors(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_INVALID
    assert "summary.json" in capsys.readouterr().err
    for name in ("records.csv", "timeline.csv", "actions.csv"):
        (tmp_path / name).write_text("x\n")
    (tmp_path / "summary.json").write_text("{not json")
    assert main(["report", str(tmp_path)]) == EXIT_INVALID
    assert "summary.json" in capsys.readouterr().err
