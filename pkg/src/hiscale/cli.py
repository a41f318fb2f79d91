"""Command-line entry point: ``sim simulate | sweep | report``.

Exit codes: 0 ok, 2 invalid input (config, grid, artifacts), 3 a run hit
its horizon with work left (artifacts are still written).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .config import ScenarioConfig, dump_config, resolve_config, with_overrides
from .engine import run as run_scenario
from .metrics import summarize
from .workload import ValidationError

log = logging.getLogger("hiscale")

OUTPUT_ROOT_ENV = "HISCALE_OUTPUT_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_INCOMPLETE = 0, 2, 3

RUN_FILES = ("summary.json", "records.csv", "timeline.csv", "actions.csv")
TABLE_COLUMNS = ("combined_attainment", "interactive_combined_attainment", "batch_ttft_attainment",
                 "per_instance_tput", "gpu_hours", "peak_gpus", "scale_ups", "scale_downs", "hysteresis")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# simulate

def simulate_one(cfg: ScenarioConfig, outdir: Path) -> dict:
    """Run one scenario, write its artifacts and return the flat summary."""
    result = run_scenario(cfg)
    summary = summarize(result).to_dict()
    result.write(outdir, summary)
    (outdir / "config.yaml").write_text(dump_config(cfg))
    return summary


def cmd_simulate(args) -> int:
    cfg = resolve_config(args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, {"seed": args.seed})
    outdir = Path(args.output) if args.output else Path(cfg.outputs or output_root()) / f"{cfg.name}-seed{cfg.seed}"
    summary = simulate_one(cfg, outdir)
    print_table([summary], key=None)
    print(f"artifacts: {outdir}")
    if summary["incomplete"]:
        log.warning("run reached its horizon with work left; results are flagged incomplete")
        return EXIT_INCOMPLETE
    return EXIT_OK


# sweep

def load_grid(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ValidationError(f"grid {path}: {exc}") from None
    if not isinstance(data, dict) or not data:
        raise ValidationError(f"grid {path}: expected a non-empty mapping of parameter -> values")
    grid = {}
    for key, values in data.items():
        values = values if isinstance(values, list) else [values]
        if not values:
            raise ValidationError(f"grid {path}: parameter '{key}' has no values")
        grid[str(key)] = values
    return grid


def grid_points(grid: dict) -> list[dict]:
    """Cartesian product of the grid, with duplicate points dropped (warned)."""
    keys = list(grid)
    points, seen = [], set()
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, combo))
        sig = json.dumps(point, sort_keys=True)
        if sig in seen:
            log.warning("duplicate grid point %s skipped", sig)
            continue
        seen.add(sig)
        points.append(point)
    return points


def _sweep_worker(job):
    cfg_doc, point, outdir = job
    cfg = with_overrides(ScenarioConfig.model_validate(cfg_doc), point)
    return simulate_one(cfg, Path(outdir))


def cmd_sweep(args) -> int:
    base = resolve_config(args.config)
    points = grid_points(load_grid(args.grid))
    outdir = Path(args.output) if args.output else output_root() / f"{base.name}-sweep"
    cfgs = []
    for i, point in enumerate(points):
        if not args.same_seed and "seed" not in point:
            point = {**point, "seed": base.seed + i}
        cfgs.append((i, point, with_overrides(base, point)))  # validates every point up front
    jobs = [(cfg.to_dict(), {}, str(outdir / f"point_{i:03d}")) for i, _, cfg in cfgs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            summaries = list(ex.map(_sweep_worker, jobs))
    else:
        summaries = [_sweep_worker(j) for j in jobs]

    grid_keys = list(dict.fromkeys(k for _, p, _ in cfgs for k in p))
    rows = []
    for (i, point, cfg), summary in zip(cfgs, summaries):
        row = {"point": i, **{k: point.get(k, "") for k in grid_keys}, **summary}
        row["config_hash"] = cfg.config_hash()
        rows.append(row)
    write_rows(outdir / "sweep.csv", rows)
    print_table(rows, key=grid_keys[0] if grid_keys else None)
    print(f"sweep: {outdir / 'sweep.csv'}")
    return EXIT_INCOMPLETE if any(r["incomplete"] for r in rows) else EXIT_OK


def write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


# report

def _num(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return x


def _sort_key(v):
    v = _num(v)
    return (0, v, "") if isinstance(v, float) else (1, 0.0, str(v))


def read_run(path: Path) -> dict:
    missing = [f for f in RUN_FILES if not (path / f).is_file()]
    if missing:
        raise ValidationError(f"{path}: missing artifacts {missing}; expected {list(RUN_FILES)}")
    try:
        return json.loads((path / "summary.json").read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path / 'summary.json'}: cannot parse ({exc})") from None


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def run_plotdata(path: Path) -> list[tuple]:
    rows = []
    for row in _read_csv(path / "timeline.csv"):
        t, mid = row["clock"], row["model_id"]
        for metric in ("gpus", "ibp", "queue_len_batch", "queue_len_interactive"):
            if row.get(metric, "") != "":
                rows.append((metric, t, row[metric], mid))
        for pair in filter(None, row.get("max_batch_sizes", "").split(";")):
            iid, size = pair.split(":")
            rows.append(("max_batch_size", t, size, f"instance_{iid}"))
    return rows


def sweep_plotdata(rows: list[dict], key: str) -> list[tuple]:
    out = []
    for r in rows:
        for metric in TABLE_COLUMNS:
            if r.get(metric, "") != "":
                out.append((metric, r.get(key, r.get("point")), r[metric], "sweep"))
    return out


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir() and (path / "sweep.csv").is_file():
        path = path / "sweep.csv"
    if path.is_file() and path.name.endswith(".csv"):
        try:
            rows = _read_csv(path)
        except (csv.Error, UnicodeDecodeError) as exc:
            raise ValidationError(f"{path}: cannot parse ({exc})") from None
        if not rows or "point" not in rows[0]:
            raise ValidationError(f"{path}: not a sweep table (expected a 'point' column)")
        # grid columns sit between "point" and the first summary column
        cols = list(rows[0])
        grid_cols = cols[1:cols.index("scenario")] if "scenario" in cols else []
        key = grid_cols[0] if grid_cols else "point"
        rows.sort(key=lambda r: (_sort_key(r.get(key)), int(r["point"])))
        print_table(rows, key=key)
        plot = sweep_plotdata(rows, key)
        target = path.parent / "plotdata.csv"
    elif path.is_dir():
        summary = read_run(path)
        print_table([summary], key=None)
        plot = run_plotdata(path)
        target = path / "plotdata.csv"
    else:
        raise ValidationError(f"{path}: no run directory or sweep.csv here; expected {list(RUN_FILES)} or sweep.csv")
    with target.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "x", "y", "series"))
        w.writerows(plot)
    print(f"plot data: {target}")
    return EXIT_OK


def print_table(rows: list[dict], key: str | None) -> None:
    cols = ([key] if key else ["scenario", "seed"]) + list(TABLE_COLUMNS)

    counts = {"seed", "point", "peak_gpus", "scale_ups", "scale_downs"}

    def fmt(v, col):
        v = _num(v)
        if isinstance(v, float):
            if math.isnan(v):
                return "-"
            return f"{v:.0f}" if col in counts else f"{v:.3f}"
        return "-" if v in (None, "") else str(v)

    cells = [[fmt(r.get(c), c) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="LLM serving cluster autoscaling simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario")
    s.add_argument("-c", "--config", required=True, help="scenario YAML, or a bundled scenario name")
    s.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<name>-seed<seed>)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run a parameter grid")
    w.add_argument("-c", "--config", required=True)
    w.add_argument("-g", "--grid", required=True, help="YAML mapping of dotted config paths to value lists")
    w.add_argument("-o", "--output")
    w.add_argument("-j", "--jobs", type=int, default=1, help="parallel worker processes")
    w.add_argument("--same-seed", action="store_true", help="use the base seed at every point")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="summarize a run directory or sweep.csv")
    r.add_argument("path")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
