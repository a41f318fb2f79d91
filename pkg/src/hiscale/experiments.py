"""Controlled experiments behind the acceptance checks and notebooks.

Each function builds a small, self-contained setup (one instance, a drain
queue, a randomized batch-dispatch case), runs it, and returns plain numbers so the
tests and narrative scripts can share them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autoscale_global as ag
from .config import parse_config
from .engine import Simulator, bootstrap_throughput
from .metrics import NOT_CONVERGED, convergence_time, r_squared
from .perfmodel import Admission, InstanceClass, InstanceState, Job, PerfProfile, admit, calibrate_profile, step
from .workload import RequestClass, TokenDist, TokenFamily, make_requests, sample_tokens

FIXED_TOKENS = (180, 200)


# single-instance controller convergence

def steady_max_itl(profile: PerfProfile, batch_size: int, tokens=FIXED_TOKENS, n_requests: int = 3000,
                   warm: float = 100.0, until: float = 300.0) -> float:
    """Largest per-iteration ITL of a saturated instance held at ``batch_size``."""
    dist = TokenDist(TokenFamily.EMPIRICAL, table=(tuple(tokens),))
    reqs = make_requests(np.zeros(n_requests), sample_tokens(dist, n_requests), RequestClass.BATCH, profile.model_id)
    backlog = [Job(r) for r in reversed(reqs)]
    st = InstanceState(0, InstanceClass.BATCH, profile, max_batch_size=batch_size)
    now, worst = 0.0, 0.0
    while backlog and now < until:
        while backlog and admit(st, backlog[-1], now) is Admission.ADMITTED:
            backlog.pop()
        res = step(st, now)
        now = res.next_event_time
        backlog.extend(reversed(res.preemptions))
        if now > warm and res.n_decoding:
            worst = max(worst, res.observed_itl)
    return worst


def feasible_batch_size(profile: PerfProfile, itl_slo: float, tokens=FIXED_TOKENS, hi: int = 4096) -> int:
    """Offline oracle: largest batch size whose steady max ITL stays within ``itl_slo``.

    Bisection over the batch size; ITL is nondecreasing in it.
    """
    lo = 1
    if steady_max_itl(profile, lo, tokens) > itl_slo:
        return 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if steady_max_itl(profile, mid, tokens) <= itl_slo:
            lo = mid
        else:
            hi = mid - 1
    return lo


@dataclass
class ConvergenceRun:
    seed: int
    itl_slo: float
    convergence_time: object  # seconds, or NOT_CONVERGED
    final_batch: int
    final_level: float  # time-weighted limit over the final window
    lbp_mean: float
    lbp_max: float
    history: list


def controller_convergence(seed: int = 0, cls: str = "interactive", rate: float = 8.0, horizon: float = 400.0,
                           preset: str = "small", band: float = 0.1, final_window: float = 60.0,
                           tokens=FIXED_TOKENS, **autoscaler) -> ConvergenceRun:
    """One instance, local control only, stationary Poisson load with fixed request lengths."""
    slo = 0.2 if cls == "interactive" else 2.0
    doc = {
        "name": f"convergence_{cls}", "seed": seed, "horizon": horizon,
        "profiles": {preset: {"preset": preset}},
        "workload": [{"model_id": preset, "cls": cls, "itl_slo": slo, "ttft_slo": 1e6,
                      "tokens": {"family": "empirical", "table": [list(tokens)]},
                      "arrival": {"mean_rate": rate, "duration": horizon}}],
        "initial": [{"model_id": preset, cls: 1}],
        "autoscaler": {"kind": "static", "local_control": True, **autoscaler},
    }
    sim = Simulator(parse_config(doc))
    itls = []
    on_step = sim._on_step_complete

    def record(iid):
        res = sim.aux[iid].inflight
        if res.n_decoding:
            itls.append((res.next_event_time, res.observed_itl))
        on_step(iid)

    sim._on_step_complete = record
    run = sim.run()
    iid = min(run.batch_history)
    hist = run.batch_history[iid]
    ct = convergence_time(hist, band, final_window, end=run.end_time)
    ts = np.array([t for t, _ in hist] + [run.end_time])
    vs = np.array([v for _, v in hist], dtype=float)
    lo = run.end_time - final_window
    w = np.clip(np.minimum(ts[1:], run.end_time) - np.maximum(ts[:-1], lo), 0, None)
    level = float((vs * w).sum() / w.sum()) if w.sum() > 0 else float(vs[-1])
    tail = np.array([x for t, x in itls if t > lo]) / slo
    if ct is not NOT_CONVERGED:
        ct = ct - hist[0][0]
    return ConvergenceRun(seed, slo, ct, int(vs[-1]), level, float(tail.mean()), float(tail.max()), hist)


# queue-wait estimator accuracy

def drain_start_times(profile: PerfProfile, jobs: list, batch_size: int) -> np.ndarray:
    """Start (admission) time of each job when one instance drains them FCFS from t = 0."""
    backlog = list(reversed(jobs))
    st = InstanceState(0, InstanceClass.BATCH, profile, max_batch_size=batch_size)
    now = 0.0
    while backlog or st.n_running:
        while backlog and admit(st, backlog[-1], now) is Admission.ADMITTED:
            backlog.pop()
        res = step(st, now)
        now = res.next_event_time
        backlog.extend(reversed(res.preemptions))
    return np.array([j.started_at for j in jobs])


def estimator_accuracy(queue_size: int, seed: int = 0, preset: str = "small", batch_size: int = 64,
                       n_history: int = 2000) -> float:
    """R^2 of estimated vs realized queue waits over one drain of ``queue_size`` requests.

    The estimate for the request at position k is k * mu_o / theta, with mu_o
    fitted from an independent history sample and theta from the offline
    calibration run: the controller never sees the drained requests' lengths.
    """
    prof = calibrate_profile(preset)
    dist = TokenDist(seed=10_000 + seed)
    toks = sample_tokens(dist, n_history + queue_size)
    out_dist = ag.fit_output_distribution(toks[:n_history, 1])
    reqs = make_requests(np.zeros(queue_size), toks[n_history:], RequestClass.BATCH, prof.model_id)
    realized = drain_start_times(prof, [Job(r) for r in reqs], batch_size)
    theta = ag.ThroughputEstimate(bootstrap_throughput(prof, batch_size))
    ahead = np.arange(queue_size) * out_dist.mu_o
    est = [ag.estimate_waiting_time(a, theta, 1) for a in ahead]
    return r_squared(est, realized)


def estimator_r2_table(sizes=(100, 500, 1000, 2000), seeds=range(10), **kw) -> dict:
    """Median R^2 across seeds for each queue size."""
    return {q: float(np.median([estimator_accuracy(q, s, **kw) for s in seeds])) for q in sizes}


# batch-dispatch minimality

@dataclass
class DrainCase:
    groups: list
    out_dist: ag.OutputDist
    theta: ag.ThroughputEstimate
    now: float
    base_rate: float
    pending: list
    load_time: float
    max_new: int


def random_drain_case(rng: np.random.Generator, max_queue: int = 50_000, max_new: int = 64) -> DrainCase:
    """Random groups, capacity and deadlines, scaled so answers spread over 0..max_new."""
    n_groups = int(rng.integers(1, 5))
    slos = np.sort(rng.uniform(600, 7200, n_groups))
    sizes = rng.multinomial(int(rng.integers(100, max_queue + 1)), np.ones(n_groups) / n_groups)
    now = 1000.0
    queue, rid = [], 0
    for slo, n in zip(slos, sizes):
        for _ in range(max(int(n), 1)):
            arrival = now - rng.uniform(0, 300)
            queue.append(ag.QueuedView(rid, arrival, int(rng.integers(20, 2000)), float(slo)))
            rid += 1
    queue.sort(key=lambda v: (v.arrival_time, v.id))
    groups = ag.form_request_groups(queue, tolerance=60.0)
    mu = float(rng.uniform(100, 600))
    out = ag.OutputDist(prior_mu=mu, prior_sigma=mu)
    theta = ag.ThroughputEstimate(float(rng.uniform(200, 2000)))
    pending = [(float(rng.uniform(0, 60)), theta.theta_tput) for _ in range(int(rng.integers(0, 3)))]
    # existing capacity between none and roughly enough for the loosest deadline
    needed = sum(g.count for g in groups) * mu / float(slos[-1])
    base = float(rng.uniform(0.0, 1.2)) * needed
    return DrainCase(groups, out, theta, now, base, pending, float(rng.uniform(10, 120)), max_new)


def _oracle_waits(tokens_ahead: np.ndarray, base_rate: float, ramps) -> np.ndarray:
    """Drain times by inverting the cumulative-capacity curve with np.interp."""
    pts = sorted({0.0} | {max(0.0, o) for o, _ in ramps})
    rates = [base_rate + sum(r for o, r in ramps if max(0.0, o) <= t) for t in pts]
    cum = [0.0]
    for i in range(1, len(pts)):
        cum.append(cum[-1] + rates[i - 1] * (pts[i] - pts[i - 1]))
    # extend past the last breakpoint far enough to cover every target
    last_rate = rates[-1]
    need = float(tokens_ahead.max(initial=0.0))
    if last_rate <= 0:
        out = np.full(tokens_ahead.shape, math.inf)
        out[tokens_ahead <= cum[-1]] = np.interp(tokens_ahead[tokens_ahead <= cum[-1]], cum, pts)
        out[tokens_ahead <= 0] = 0.0
        return out
    t_far = pts[-1] + max(0.0, need - cum[-1]) / last_rate + 1.0
    xs = np.array(cum + [cum[-1] + last_rate * (t_far - pts[-1])])
    ts = np.array(pts + [t_far])
    # strictly increasing x for interp: drop flat segments (zero-rate stretches)
    keep = np.concatenate([[True], np.diff(xs) > 0])
    xs, ts = xs[keep], ts[keep]
    # on a flat stretch the drain finishes at its end, which the compressed curve reproduces
    return np.interp(tokens_ahead, xs, ts)


def brute_force_dispatch(case: DrainCase) -> tuple[int, bool]:
    """Smallest d in 0..max_new with no group late, by exhaustive search (and whether none works)."""
    counts = np.array([g.count for g in case.groups], dtype=float)
    mu = case.out_dist.mu_o
    before = np.concatenate([[0.0], np.cumsum(counts * mu)[:-1]])
    ahead = before + (counts - 1) * mu
    deadlines = np.array([g.earliest_deadline for g in case.groups])
    for d in range(case.max_new + 1):
        ramps = list(case.pending) + ([(case.load_time, d * case.theta.theta_tput)] if d else [])
        waits = _oracle_waits(ahead, case.base_rate, ramps)
        if not np.any(case.now + waits > deadlines):
            return d, False
    return case.max_new, True


def batch_scale_dispatch(case: DrainCase) -> tuple[int, bool]:
    dec = ag.batch_scale(case.groups, case.out_dist, case.theta, case.now, base_rate=case.base_rate,
                         pending=case.pending, load_time=case.load_time, max_new=case.max_new)
    return dec.dispatch, dec.unmet


# performance-model shape

SWEEP_SIZES = (8, 16, 32, 64, 128, 192, 256, 384, 512, 768, 1024, 2048)


def throughput_curve(profile: PerfProfile, sizes=SWEEP_SIZES, n_requests: int = 4000, seed: int = 0):
    """(requests/s, mean ITL) of a saturated instance at each enforced batch size."""
    from .perfmodel import sweep_throughput

    rows = [sweep_throughput(profile, b, n_requests=n_requests, seed=seed) for b in sizes]
    return np.array([r[0] for r in rows]), np.array([r[2] for r in rows])


def is_unimodal(values, tol: float = 0.01) -> bool:
    """One local maximum: rises to the peak and falls after it, wiggles within ``tol`` treated as plateau."""
    y = np.asarray(values, dtype=float)
    k = int(np.argmax(y))
    up = all(y[i + 1] >= y[i] * (1 - tol) for i in range(k))
    down = all(y[i + 1] <= y[i] * (1 + tol) for i in range(k, y.size - 1))
    return up and down


def has_interior_peak(values, tol: float = 0.01) -> bool:
    """The maximum beats both ends of the swept range by more than ``tol``."""
    y = np.asarray(values, dtype=float)
    peak = y.max()
    return peak > y[0] * (1 + tol) and peak > y[-1] * (1 + tol)
