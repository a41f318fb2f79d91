"""Evaluation quantities computed from run outputs.

Every function here is pure: it reads records, actions or timeline rows and
never touches simulator state, so the same code scores a live ``RunResult``
and rows read back from CSV.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .workload import ValidationError


class NotConverged:
    """Sentinel for a series that never settles inside its band."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "NotConverged"

    def __bool__(self) -> bool:
        return False


NOT_CONVERGED = NotConverged()


def _get(rec, key):
    return rec[key] if isinstance(rec, dict) else getattr(rec, key)


def _f(x) -> float:
    if x is None or x == "":
        return math.nan
    return float(x)


# SLO attainment

@dataclass(frozen=True)
class Attainment:
    ttft: float
    itl: float
    combined: float
    n: int


def request_meets(rec, itl_statistic: str = "max") -> tuple[bool, bool]:
    """(TTFT met, ITL met) for one record, recomputed from its raw fields."""
    arrival = _f(_get(rec, "arrival"))
    first = _f(_get(rec, "first_token"))
    done = not math.isnan(_f(_get(rec, "completion")))
    ttft_ok = not math.isnan(first) and first - arrival <= _f(_get(rec, "ttft_slo"))
    gap = _f(_get(rec, "max_itl" if itl_statistic == "max" else "mean_itl"))
    itl_ok = done and gap <= _f(_get(rec, "itl_slo"))
    return ttft_ok, itl_ok


def slo_attainment(records: Iterable, itl_statistic: str = "max", partial: bool = False,
                   warmup: float = 0.0, cls: str | None = None) -> Attainment:
    """Fractions of requests meeting TTFT, ITL, and both.

    Requests arriving before ``warmup`` are excluded. Unfinished requests make
    this an error unless ``partial`` is set, in which case they count as
    missed. No requests scores 1.0 with ``n = 0``.
    """
    n = t_ok = i_ok = both = 0
    for rec in records:
        if cls is not None and _get(rec, "cls" if not isinstance(rec, dict) else "class") != cls:
            continue
        if _f(_get(rec, "arrival")) < warmup:
            continue
        if math.isnan(_f(_get(rec, "completion"))) and not partial:
            raise ValidationError(f"record {_get(rec, 'id')} is incomplete; pass partial=True to score anyway")
        a, b = request_meets(rec, itl_statistic)
        n += 1
        t_ok += a
        i_ok += b
        both += a and b
    if n == 0:
        return Attainment(1.0, 1.0, 1.0, 0)
    return Attainment(t_ok / n, i_ok / n, both / n, n)


# scaling churn

def count_actions(actions: Iterable) -> tuple[int, int]:
    ups = downs = 0
    for a in actions:
        kind = _get(a, "kind")
        kind = getattr(kind, "value", kind)
        if kind == "remove":
            downs += 1
        else:
            ups += 1
    return ups, downs


def hysteresis(actions: Iterable) -> float:
    """(scale-ups + scale-downs) / scale-ups; 0.0 when nothing scaled up."""
    ups, downs = count_actions(actions)
    if ups == 0:
        return 0.0
    return (ups + downs) / ups


# controller convergence

def convergence_time(series: Sequence[tuple[float, float]], band: float = 0.1, final_window: float = 60.0,
                     end: float | None = None):
    """Earliest time after which a step series stays within ``band`` of its final level.

    ``series`` holds ``(t, value)`` change points; each value holds until the
    next point (the last until ``end``). The final level ``b*`` is the
    time-weighted mean over ``[end - final_window, end]``. Returns
    ``NOT_CONVERGED`` if the series is out of band at ``end``.
    """
    if not series:
        raise ValidationError("empty series")
    ts = np.array([p[0] for p in series], dtype=float)
    vs = np.array([p[1] for p in series], dtype=float)
    if np.any(np.diff(ts) < 0):
        raise ValidationError("series times must be nondecreasing")
    end = ts[-1] if end is None else float(end)
    lo_t = max(ts[0], end - final_window)
    nxt = np.append(ts[1:], end)
    overlap = np.clip(np.minimum(nxt, end) - np.maximum(ts, lo_t), 0.0, None)
    if overlap.sum() > 0:
        b_star = float((vs * overlap).sum() / overlap.sum())
    else:
        b_star = float(vs[-1])
    out = np.abs(vs - b_star) > band * b_star
    # points that are superseded at the same instant never held
    held = nxt > ts
    held[-1] = True
    out &= held
    if out[-1]:
        return NOT_CONVERGED
    idx = np.flatnonzero(out)
    if idx.size == 0:
        return float(ts[0])
    return float(nxt[idx[-1]])


# estimator accuracy

def r_squared(estimated: Sequence[float], realized: Sequence[float]) -> float:
    est = np.asarray(estimated, dtype=float)
    real = np.asarray(realized, dtype=float)
    if est.shape != real.shape or est.size < 2:
        raise ValidationError("need >= 2 aligned (estimated, realized) pairs")
    ss_tot = float(((real - real.mean()) ** 2).sum())
    if ss_tot <= 0:
        raise ValidationError("realized values have zero variance")
    ss_res = float(((real - est) ** 2).sum())
    return 1.0 - ss_res / ss_tot


QUEUE_BUCKETS = (100, 500, 1000, 2000)


def estimator_r2_by_bucket(estimates: Iterable, buckets: Sequence[int] = QUEUE_BUCKETS) -> dict:
    """R^2 of queue-wait estimates grouped by queue size (<= each bucket edge)."""
    pairs = defaultdict(list)
    for e in estimates:
        real = _f(_get(e, "realized_wait"))
        if math.isnan(real):
            continue
        q = int(_f(_get(e, "queue_size")))
        key = next((b for b in buckets if q <= b), f">{buckets[-1]}")
        pairs[key].append((_f(_get(e, "estimated_wait")), real))
    out = {}
    for key in list(buckets) + [f">{buckets[-1]}"]:
        ps = pairs.get(key, [])
        try:
            out[str(key)] = r_squared([p[0] for p in ps], [p[1] for p in ps])
        except ValidationError:
            out[str(key)] = None
    return out


# capacity

def _per_clock(timeline: Iterable, key: str) -> tuple[np.ndarray, np.ndarray]:
    # a repeated (clock, model) row supersedes the earlier one
    last: dict[tuple, float] = {}
    for row in timeline:
        last[(_f(_get(row, "clock")), _get(row, "model_id"))] = _f(_get(row, key))
    acc: dict[float, float] = {}
    for (t, _), v in last.items():
        acc[t] = acc.get(t, 0.0) + v
    ts = np.array(sorted(acc), dtype=float)
    return ts, np.array([acc[t] for t in ts], dtype=float)


def gpu_hours(timeline: Iterable) -> tuple[float, int]:
    """Trapezoidal integral of live GPUs over the timeline, and the peak."""
    rows = list(timeline)
    if not rows:
        return 0.0, 0
    ts, g = _per_clock(rows, "gpus")
    area = float(np.sum((g[1:] + g[:-1]) * np.diff(ts)) / 2) if len(ts) > 1 else 0.0
    return area / 3600.0, int(g.max())


def instance_seconds(timeline: Iterable) -> float:
    rows = [dict(r) if isinstance(r, dict) else {k: _get(r, k) for k in
            ("clock", "model_id", "n_interactive", "n_mixed", "n_batch")} for r in timeline]
    if not rows:
        return 0.0
    for r in rows:
        r["_n"] = sum(_f(r[k]) for k in ("n_interactive", "n_mixed", "n_batch"))
    ts, n = _per_clock(rows, "_n")
    return float(np.sum((n[1:] + n[:-1]) * np.diff(ts)) / 2) if len(ts) > 1 else 0.0


# run summary

@dataclass
class RunSummary:
    scenario: str
    seed: int
    config_hash: str
    n_requests: int
    incomplete: bool
    end_time: float
    ttft_attainment: float
    itl_attainment: float
    combined_attainment: float
    interactive_ttft_attainment: float
    interactive_itl_attainment: float
    interactive_combined_attainment: float
    batch_ttft_attainment: float
    batch_itl_attainment: float
    batch_combined_attainment: float
    per_instance_tput: float
    gpu_hours: float
    peak_gpus: int
    scale_ups: int
    scale_downs: int
    hysteresis: float
    no_scaling: bool
    convergence_time: dict = field(default_factory=dict)
    estimator_r2: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Flat, JSON-ready mapping (nested maps flattened with ``_``)."""
        d = asdict(self)
        flat = {}
        for k, v in d.items():
            if isinstance(v, dict):
                for sub, x in v.items():
                    flat[f"{k}_{sub}"] = x
            else:
                flat[k] = v
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in flat.items()}


def instance_convergence(run, band: float = 0.1, final_window: float = 60.0, min_life: float = 120.0) -> dict:
    """Median per-class convergence time of max_batch_size over long-lived instances."""
    by_cls = defaultdict(list)
    for iid, hist in run.batch_history.items():
        if not hist:
            continue
        removed = next((a.time for a in run.actions if a.kind.value == "remove" and a.instance_id == iid), None)
        end = run.end_time if removed is None else removed
        if end - hist[0][0] < min_life:
            continue
        ct = convergence_time(hist, band, final_window, end=end)
        by_cls[run.instance_classes[iid]].append(None if ct is NOT_CONVERGED else ct - hist[0][0])
    out = {}
    for cls in ("interactive", "mixed", "batch"):
        vals = by_cls.get(cls)
        if not vals:
            continue
        ok = [v for v in vals if v is not None]
        out[cls] = float(np.median(ok)) if len(ok) * 2 > len(vals) else None
    return out


def summarize(run) -> RunSummary:
    cfg = run.config
    stat = cfg.itl_statistic
    recs = run.records
    warm = cfg.warmup
    overall = slo_attainment(recs, stat, partial=True, warmup=warm)
    inter = slo_attainment(recs, stat, partial=True, warmup=warm, cls="interactive")
    batch = slo_attainment(recs, stat, partial=True, warmup=0.0, cls="batch")
    done = sum(1 for r in recs if not r.incomplete)
    inst_s = instance_seconds(run.timeline)
    gh, peak = gpu_hours(run.timeline)
    ups, downs = count_actions(run.actions)
    return RunSummary(
        scenario=cfg.name, seed=cfg.seed, config_hash=cfg.config_hash(), n_requests=len(recs),
        incomplete=bool(run.incomplete), end_time=float(run.end_time),
        ttft_attainment=overall.ttft, itl_attainment=overall.itl, combined_attainment=overall.combined,
        interactive_ttft_attainment=inter.ttft, interactive_itl_attainment=inter.itl,
        interactive_combined_attainment=inter.combined,
        batch_ttft_attainment=batch.ttft, batch_itl_attainment=batch.itl, batch_combined_attainment=batch.combined,
        per_instance_tput=done / inst_s if inst_s > 0 else 0.0,
        gpu_hours=gh, peak_gpus=peak, scale_ups=ups, scale_downs=downs,
        hysteresis=hysteresis(run.actions), no_scaling=ups == 0,
        convergence_time=instance_convergence(run),
        estimator_r2=estimator_r2_by_bucket(run.estimates),
    )
