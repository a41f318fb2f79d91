"""Deterministic discrete-event simulation of an LLM serving cluster.

The event loop owns all state. Ties in event time are broken by event-kind
priority and then by insertion sequence, and every choice among instances
goes to the lowest id, so a run is a pure function of its config.
"""

from __future__ import annotations

import csv
import enum
import heapq
import itertools
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from . import autoscale_global as ag
from .autoscale_local import LocalAutoscaler, LocalCtlState, instance_itl_slo
from .config import AutoscalerKind, ScenarioConfig
from .perfmodel import (
    Admission, InstanceClass, InstanceState, Job, PerfProfile, admit, evict_for_interactive,
    kv_need, shrink_to, step, sweep_throughput,
)
from .workload import (
    ArrivalSpec, Request, RequestClass, TokenDist, format_time, gen_arrivals, make_requests,
    merge_streams, sample_tokens,
)

log = logging.getLogger(__name__)


class CapacityExhausted(RuntimeError):
    pass


class EventKind(enum.IntEnum):
    # value doubles as tie-break priority
    STEP_COMPLETE = 0
    INSTANCE_READY = 1
    EVICTION_REQUEUE = 2
    ARRIVAL = 3
    AUTOSCALE_TICK = 4


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    seq: int
    payload: Any = None


class EventQueue:
    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()

    def push(self, time: float, kind: EventKind, payload=None) -> None:
        heapq.heappush(self._heap, (time, int(kind), next(self._seq), payload))

    def pop(self) -> SimEvent:
        t, k, s, p = heapq.heappop(self._heap)
        return SimEvent(t, EventKind(k), s, p)

    def __len__(self) -> int:
        return len(self._heap)


class ActionKind(str, enum.Enum):
    ADD_INTERACTIVE = "add_interactive"
    ADD_MIXED = "add_mixed"
    ADD_BATCH = "add_batch"
    REMOVE = "remove"


class ActionReason(str, enum.Enum):
    IBP = "ibp"
    BBP = "bbp"
    BASELINE = "baseline"
    RETIRE = "retire"


_ADD_KIND = {
    InstanceClass.INTERACTIVE: ActionKind.ADD_INTERACTIVE,
    InstanceClass.MIXED: ActionKind.ADD_MIXED,
    InstanceClass.BATCH: ActionKind.ADD_BATCH,
}


@dataclass(frozen=True)
class ScalingAction:
    time: float
    kind: ActionKind
    instance_id: int
    reason: ActionReason
    model_id: str = ""
    instance_class: str = ""

    @property
    def is_up(self) -> bool:
        return self.kind is not ActionKind.REMOVE


class BatchQueue:
    """Batch requests waiting for service, clustered into request groups.

    Groups form by the same single-pass TTFT-SLO rule as
    ``form_request_groups``. Service takes the head of the group with the
    earliest deadline.
    """

    def __init__(self, tolerance: float = 60.0):
        self.tolerance = tolerance
        self._groups: list[dict] = []
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def _group_for(self, slo: float) -> dict:
        for g in self._groups:
            if abs(slo - g["slo"]) <= self.tolerance:
                return g
        g = {"id": len(self._groups), "slo": slo, "jobs": deque(), "heap": [], "in_heap": set(),
             "gone": set(), "input": 0}
        self._groups.append(g)
        return g

    def _add(self, job: Job, front: bool) -> None:
        g = self._group_for(job.request.ttft_slo)
        (g["jobs"].appendleft if front else g["jobs"].append)(job)
        # a request's deadline never changes, so a stale heap entry can be revived
        if job.id in g["in_heap"]:
            g["gone"].discard(job.id)
        else:
            heapq.heappush(g["heap"], (job.request.deadline, job.id))
            g["in_heap"].add(job.id)
        g["input"] += job.request.input_tokens
        self._n += 1

    def push_back(self, job: Job) -> None:
        self._add(job, front=False)

    def push_front(self, job: Job) -> None:
        self._add(job, front=True)

    def _live_groups(self) -> list[dict]:
        out = []
        for g in self._groups:
            heap = g["heap"]
            while heap and heap[0][1] in g["gone"]:
                _, jid = heapq.heappop(heap)
                g["gone"].discard(jid)
                g["in_heap"].discard(jid)
            if g["jobs"]:
                out.append(g)
        return out

    def _next_group(self):
        live = self._live_groups()
        if not live:
            return None
        return min(live, key=lambda g: (g["heap"][0][0], g["id"]))

    def peek(self) -> Job | None:
        g = self._next_group()
        return g["jobs"][0] if g else None

    def pop(self) -> Job:
        g = self._next_group()
        job = g["jobs"].popleft()
        g["gone"].add(job.id)
        g["input"] -= job.request.input_tokens
        self._n -= 1
        return job

    def groups(self) -> list[ag.RequestGroup]:
        """Per-group aggregates, sorted by earliest deadline (members omitted)."""
        out = []
        for g in self._live_groups():
            rg = ag.RequestGroup(g["id"], g["slo"])
            rg.count = len(g["jobs"])
            rg.input_tokens = g["input"]
            rg.earliest_deadline = g["heap"][0][0]
            rg.last_member = g["jobs"][-1].id
            out.append(rg)
        out.sort(key=lambda r: (r.earliest_deadline, r.group_id))
        return out

    def views(self) -> list[ag.QueuedView]:
        """Controller-visible snapshot in service order."""
        out = []
        for rg in self.groups():
            g = self._groups[rg.group_id]
            out.extend(
                ag.QueuedView(j.id, j.request.arrival_time, j.request.input_tokens, j.request.ttft_slo)
                for j in g["jobs"]
            )
        return out


@dataclass
class ClusterState:
    profiles: dict[str, PerfProfile]
    gpu_cap: int = 50
    clock: float = 0.0
    instances: dict[int, InstanceState] = field(default_factory=dict)
    interactive_queue: dict[str, deque] = field(default_factory=dict)
    batch_queue: dict[str, BatchQueue] = field(default_factory=dict)
    actions: list[ScalingAction] = field(default_factory=list)
    next_id: int = 0
    allow_eviction: bool = True
    least_loaded: bool = False  # route to the emptiest instance instead of first fit

    def gpus_in_use(self) -> int:
        return sum(i.profile.gpus_per_instance for i in self.instances.values())

    def pool(self, model_id: str) -> list[InstanceState]:
        return [i for i in self.instances.values() if i.profile.model_id == model_id]

    @property
    def pending_provisions(self) -> list[tuple[InstanceClass, float]]:
        return [(i.cls, i.ready_at) for i in self.instances.values() if i.ready_at > self.clock]


def provision(cluster: ClusterState, cls: InstanceClass, profile: PerfProfile, reason: ActionReason,
              max_batch_size: int = 32, warm: bool = False, record: bool = True) -> ScalingAction:
    if cluster.gpus_in_use() + profile.gpus_per_instance > cluster.gpu_cap:
        raise CapacityExhausted(f"gpu_cap {cluster.gpu_cap} reached")
    iid = cluster.next_id
    cluster.next_id += 1
    ready = cluster.clock if warm else cluster.clock + profile.load_time
    cluster.instances[iid] = InstanceState(iid, cls, profile, max_batch_size=max_batch_size,
                                           ready_at=ready, created_at=cluster.clock)
    act = ScalingAction(cluster.clock, _ADD_KIND[cls], iid, reason, profile.model_id, cls.value)
    if record:
        cluster.actions.append(act)
    return act


def retire(cluster: ClusterState, instance_id: int, reason: ActionReason = ActionReason.RETIRE) -> ScalingAction:
    """Stop admitting; the instance is removed once its running jobs finish."""
    try:
        inst = cluster.instances[instance_id]
    except KeyError:
        raise KeyError(f"unknown instance {instance_id}") from None
    inst.draining = True
    act = ScalingAction(cluster.clock, ActionKind.REMOVE, instance_id, reason, inst.profile.model_id, inst.cls.value)
    cluster.actions.append(act)
    if inst.n_running == 0 and inst.busy_until is None:
        del cluster.instances[instance_id]
    return act


@dataclass
class RouteDecision:
    instance_id: int | None
    evicted: list[Job] = field(default_factory=list)

    @property
    def queued(self) -> bool:
        return self.instance_id is None


def route(job: Job, cluster: ClusterState, now: float) -> RouteDecision:
    """Place ``job`` on its own instance class first, then on a mixed instance.

    Interactive work may evict batch work from mixed instances. Lowest id
    wins among candidates (fewest running requests first when the cluster
    load-balances). Returns a queued decision when nothing fits.
    """
    pool = [i for i in cluster.pool(job.request.model_id) if not i.draining and i.ready_at <= now]
    if cluster.least_loaded:
        pool.sort(key=lambda i: (i.n_running, i.instance_id))
    else:
        pool.sort(key=lambda i: i.instance_id)
    own = InstanceClass.BATCH if job.is_batch else InstanceClass.INTERACTIVE
    for inst in pool:
        if inst.cls is own and admit(inst, job, now) is Admission.ADMITTED:
            return RouteDecision(inst.instance_id)
    mixed = [i for i in pool if i.cls is InstanceClass.MIXED]
    for inst in mixed:
        if admit(inst, job, now) is Admission.ADMITTED:
            return RouteDecision(inst.instance_id)
    if not job.is_batch and cluster.allow_eviction:
        for inst in mixed:
            victims = evict_for_interactive(inst, kv_need(job))
            if victims:
                res = admit(inst, job, now)
                assert res is Admission.ADMITTED, res
                return RouteDecision(inst.instance_id, victims)
    return RouteDecision(None)


# workload construction

def build_requests(cfg: ScenarioConfig) -> list[Request]:
    streams = []
    for k, s in enumerate(cfg.workload):
        a = s.arrival
        spec = ArrivalSpec(a.process, a.mean_rate, a.duration, a.cv, seed=cfg.seed * 1000 + 2 * k)
        times = gen_arrivals(spec) + a.start
        dist = TokenDist(s.tokens.family, tuple(s.tokens.input), tuple(s.tokens.output),
                         tuple(map(tuple, s.tokens.table)), seed=cfg.seed * 1000 + 2 * k + 1)
        toks = sample_tokens(dist, len(times))
        streams.append(make_requests(times, toks, s.cls, s.model_id, s.ttft_slo, s.itl_slo))
    for k, inj in enumerate(cfg.injections):
        dist = TokenDist(inj.tokens.family, tuple(inj.tokens.input), tuple(inj.tokens.output),
                         tuple(map(tuple, inj.tokens.table)), seed=cfg.seed * 1000 + 500 + k)
        toks = sample_tokens(dist, inj.count)
        streams.append(make_requests(np.full(inj.count, inj.time), toks, inj.cls, inj.model_id,
                                     inj.ttft_slo, inj.itl_slo))
    return merge_streams(streams)


@lru_cache(maxsize=32)
def bootstrap_throughput(profile: PerfProfile, batch_size: int) -> float:
    """Decode tokens/s of one saturated instance, from a single calibration run."""
    _, tok_rate, _ = sweep_throughput(profile, batch_size, n_requests=1200, seed=12345)
    return tok_rate


# results

@dataclass
class RequestRecord:
    id: int
    cls: str
    model_id: str
    arrival: float
    first_token: float
    completion: float
    mean_itl: float
    max_itl: float
    evictions: int
    preemptions: int
    ttft_slo: float
    itl_slo: float
    ttft_met: bool
    itl_met: bool
    incomplete: bool

    FIELDS = ("id", "class", "model_id", "arrival", "first_token", "completion", "mean_itl", "max_itl",
              "evictions", "preemptions", "ttft_slo", "itl_slo", "ttft_met", "itl_met", "incomplete")


@dataclass
class RunResult:
    config: ScenarioConfig
    records: list[RequestRecord]
    timeline: list[dict]
    actions: list[ScalingAction]
    estimates: list[dict]
    batch_history: dict[int, list]
    instance_classes: dict[int, str]
    end_time: float
    incomplete: bool
    n_arrived: int

    def write(self, outdir, summary: dict | None = None) -> Path:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "records.csv", RequestRecord.FIELDS,
                   ([r.id, r.cls, r.model_id, r.arrival, r.first_token, r.completion, r.mean_itl, r.max_itl,
                     r.evictions, r.preemptions, r.ttft_slo, r.itl_slo, int(r.ttft_met), int(r.itl_met),
                     int(r.incomplete)] for r in self.records))
        tl_fields = list(self.timeline[0]) if self.timeline else TIMELINE_FIELDS
        _write_csv(out / "timeline.csv", tl_fields, ([row[k] for k in tl_fields] for row in self.timeline))
        _write_csv(out / "actions.csv", ("time", "kind", "instance_id", "reason", "model_id", "instance_class"),
                   ([a.time, a.kind.value, a.instance_id, a.reason.value, a.model_id, a.instance_class]
                    for a in self.actions))
        est_fields = ("group_id", "t", "estimated_wait", "realized_wait", "queue_size", "request_id", "model_id")
        _write_csv(out / "estimates.csv", est_fields, ([e[k] for k in est_fields] for e in self.estimates))
        if summary is not None:
            (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return out


TIMELINE_FIELDS = ("clock", "model_id", "n_interactive", "n_mixed", "n_batch", "gpus", "queue_len_batch",
                   "queue_len_interactive", "ibp", "bbp", "dispatch", "unmet", "max_batch_sizes")


def _cell(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return format_time(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    return str(v)


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_cell(v) for v in row])


# the simulator

@dataclass
class _Aux:
    local: LocalAutoscaler | None
    inflight: Any = None
    log: deque = field(default_factory=deque)  # (t_end, batch_tokens, dt)
    batch_tokens: float = 0.0
    measured_batch: bool = False
    step_batch: int = 0


class Simulator:
    def __init__(self, cfg: ScenarioConfig, requests: list[Request] | None = None):
        self.cfg = cfg
        self.ac = cfg.autoscaler
        kind = AutoscalerKind(self.ac.kind)
        self.local_on = kind in (AutoscalerKind.HIERARCHICAL, AutoscalerKind.LOCAL_ONLY)
        if self.ac.local_control is not None:
            self.local_on = self.ac.local_control
        self.global_mode = {
            AutoscalerKind.HIERARCHICAL: "hierarchical",
            AutoscalerKind.GLOBAL_ONLY: "hierarchical",
            AutoscalerKind.BASELINE: "baseline",
            AutoscalerKind.LOCAL_ONLY: "baseline",
            AutoscalerKind.STATIC: "static",
        }[kind]
        self.profiles = cfg.built_profiles()
        self.requests = build_requests(cfg) if requests is None else list(requests)
        self.jobs = [Job(r) for r in self.requests]
        self.cluster = ClusterState(self.profiles, gpu_cap=cfg.gpu_cap,
                                    allow_eviction=self.global_mode != "baseline",
                                    least_loaded=self.global_mode == "baseline")
        for mid in self.profiles:
            self.cluster.interactive_queue[mid] = deque()
            self.cluster.batch_queue[mid] = BatchQueue(self.ac.tolerance)
        self.policy = ag.OverprovisionPolicy(self.ac.theta, self.ac.delta)
        self.out_dist = {mid: ag.OutputDist(*self.ac.output_prior) for mid in self.profiles}
        self.aux: dict[int, _Aux] = {}
        self.events = EventQueue()
        self.timeline: list[dict] = []
        self.estimates: list[dict] = []
        self.batch_history: dict[int, list] = {}
        self.instance_classes: dict[int, str] = {}
        self._tick_count = 0
        self._pending_batch_eval: set = set()
        self._last_bbp: dict[str, tuple] = {}
        self._n_arrived = 0
        self._theta_boot = {mid: bootstrap_throughput(p, self._batch_target()) for mid, p in self.profiles.items()}

    # setup helpers

    def _batch_target(self) -> int:
        return self.ac.max_batch_ceiling if self.local_on else self.ac.static_batch_size

    def _initial_batch(self) -> int:
        return self.ac.initial_batch_size if self.local_on else self.ac.static_batch_size

    def _register(self, act: ScalingAction) -> None:
        inst = self.cluster.instances[act.instance_id]
        local = None
        if self.local_on:
            ctl = LocalCtlState(inst.instance_id, inst.max_batch_size, self.ac.alpha,
                                deadband=self.ac.deadband, strict_halving=self.ac.strict_halving,
                                ceiling=self.ac.max_batch_ceiling)
            local = LocalAutoscaler(ctl, window=self.ac.itl_window, min_samples=self.ac.min_itl_samples,
                                    grow_when_binding=self.ac.grow_when_binding, itl_stat=self.ac.observed_itl,
                                    urgent_bp=self.ac.urgent_backpressure)
        self.aux[inst.instance_id] = _Aux(local)
        self.batch_history[inst.instance_id] = [(self.cluster.clock, inst.max_batch_size)]
        self.instance_classes[inst.instance_id] = inst.cls.value
        if inst.ready_at > self.cluster.clock:
            self.events.push(inst.ready_at, EventKind.INSTANCE_READY, inst.instance_id)

    def _provision(self, cls: InstanceClass, model_id: str, reason: ActionReason, warm=False, record=True):
        act = provision(self.cluster, cls, self.profiles[model_id], reason, self._initial_batch(), warm, record)
        self._register(act)
        return act

    # main loop

    def run(self) -> RunResult:
        cl = self.cluster
        for init in self.cfg.initial:
            for cls, n in ((InstanceClass.INTERACTIVE, init.interactive), (InstanceClass.MIXED, init.mixed),
                           (InstanceClass.BATCH, init.batch)):
                if self.global_mode == "baseline" and cls is InstanceClass.MIXED:
                    cls = InstanceClass.INTERACTIVE  # the baseline runs dedicated pools only
                for _ in range(n):
                    self._provision(cls, init.model_id, ActionReason.RETIRE, warm=True, record=False)
        for r in self.requests:
            self.events.push(r.arrival_time, EventKind.ARRIVAL, r.id)
        self.events.push(0.0, EventKind.AUTOSCALE_TICK, None)
        last_arrival = self.requests[-1].arrival_time if self.requests else 0.0
        horizon = self.cfg.horizon
        incomplete = False
        end = 0.0

        while self.events:
            ev = self.events.pop()
            if ev.time > horizon:
                incomplete = self._work_left()
                end = horizon
                break
            cl.clock = end = ev.time
            if ev.kind is EventKind.STEP_COMPLETE:
                self._on_step_complete(ev.payload)
            elif ev.kind is EventKind.INSTANCE_READY:
                inst = cl.instances.get(ev.payload)
                if inst is not None:
                    self._fill(inst)
            elif ev.kind is EventKind.EVICTION_REQUEUE:
                self._requeue(ev.payload)
            elif ev.kind is EventKind.ARRIVAL:
                self._on_arrival(self.jobs[ev.payload])
            elif ev.kind is EventKind.AUTOSCALE_TICK:
                if ev.payload is None:
                    self._on_tick()
                    if self._work_left() or cl.clock < last_arrival:
                        self.events.push(cl.clock + self.cfg.tick, EventKind.AUTOSCALE_TICK, None)
                else:
                    self._pending_batch_eval.discard((ev.time, ev.payload))
                    if self.global_mode == "hierarchical":
                        self._batch_autoscale(ev.payload, record=False)

        cl.clock = end
        if not incomplete and (not self.timeline or self.timeline[-1]["clock"] != end):
            self._record_timeline()
        return self._result(end, incomplete)

    def _work_left(self) -> bool:
        cl = self.cluster
        if self._n_arrived < len(self.requests):
            return True
        if any(cl.interactive_queue.values()) or any(len(q) for q in cl.batch_queue.values()):
            return True
        return any(i.n_running or i.busy_until is not None for i in cl.instances.values())

    # arrivals and routing

    def _on_arrival(self, job: Job) -> None:
        self._n_arrived += 1
        self._place(job, front=False)

    def _place(self, job: Job, front: bool) -> None:
        cl = self.cluster
        mid = job.request.model_id
        if job.is_batch:
            q = cl.batch_queue[mid]
            if not len(q):
                dec = route(job, cl, cl.clock)
                if not dec.queued:
                    self._kick(cl.instances[dec.instance_id])
                    return
            (q.push_front if front else q.push_back)(job)
            if self.global_mode == "baseline":
                self._baseline_batch_arrival(mid)
            key = (cl.clock, mid)
            if self.global_mode == "hierarchical" and key not in self._pending_batch_eval:
                self._pending_batch_eval.add(key)
                self.events.push(cl.clock, EventKind.AUTOSCALE_TICK, mid)
            return
        q = cl.interactive_queue[mid]
        if not q or front:
            dec = route(job, cl, cl.clock)
            if not dec.queued:
                inst = cl.instances[dec.instance_id]
                if dec.evicted:
                    self.events.push(cl.clock, EventKind.EVICTION_REQUEUE, dec.evicted)
                self._kick(inst)
                return
        (q.appendleft if front else q.append)(job)

    def _requeue(self, jobs: list[Job]) -> None:
        for job in reversed(jobs):
            self._place(job, front=True)

    def _kick(self, inst: InstanceState) -> None:
        if inst.busy_until is None and inst.n_running and inst.ready_at <= self.cluster.clock:
            self._start(inst)

    def _start(self, inst: InstanceState) -> None:
        res = step(inst, self.cluster.clock)
        aux = self.aux[inst.instance_id]
        aux.inflight = res
        aux.step_batch = inst.n_running + len(res.completions)
        inst.busy_until = res.next_event_time
        self.events.push(res.next_event_time, EventKind.STEP_COMPLETE, inst.instance_id)
        if res.preemptions:
            self.events.push(self.cluster.clock, EventKind.EVICTION_REQUEUE, res.preemptions)

    def _fill(self, inst: InstanceState) -> None:
        """Pull queued work into ``inst``: interactive first, then batch."""
        cl = self.cluster
        now = cl.clock
        if inst.draining or inst.ready_at > now:
            return
        mid = inst.profile.model_id
        if inst.cls is not InstanceClass.BATCH:
            q = cl.interactive_queue[mid]
            while q and admit(inst, q[0], now) is Admission.ADMITTED:
                q.popleft()
        if inst.cls is not InstanceClass.INTERACTIVE:
            bq = cl.batch_queue[mid]
            while len(bq):
                if admit(inst, bq.peek(), now) is not Admission.ADMITTED:
                    break
                bq.pop()
        self._kick(inst)

    # instance iterations

    def _on_step_complete(self, iid: int) -> None:
        cl = self.cluster
        inst = cl.instances[iid]
        aux = self.aux[iid]
        res = aux.inflight
        aux.inflight = None
        inst.busy_until = None
        now = cl.clock
        for job in res.completions:
            if job.is_batch:
                self.out_dist[inst.profile.model_id].update(job.request.output_tokens)
        if res.n_decoding:
            aux.log.append((now, res.decode_tokens_batch, res.next_event_time - res.start))
            aux.batch_tokens += res.decode_tokens_batch
            if res.decode_tokens_batch:
                aux.measured_batch = True
        while aux.log and aux.log[0][0] <= now - self.ac.tput_window:
            aux.batch_tokens -= aux.log.popleft()[1]

        if aux.local is not None:
            # samples count only once the batch conforms to the current limit
            if res.n_decoding and aux.step_batch <= inst.max_batch_size:
                aux.local.observe(res.observed_itl, res.decode_tokens, res.observed_itl, aux.step_batch)
            if inst.n_running:
                slo = instance_itl_slo(inst.running.slo[: inst.n_running]) * self.ac.slo_headroom
                new = aux.local.maybe_update(slo, now)
                if new is not None:
                    inst.max_batch_size = new
                    self.batch_history[iid].append((now, new))
                    mode = self.ac.shrink_preempts
                    victims = [] if mode == "none" else shrink_to(inst, new, batch_only=mode == "batch")
                    if victims:
                        self.events.push(now, EventKind.EVICTION_REQUEUE, victims)

        if inst.draining:
            if inst.n_running:
                self._start(inst)
            else:
                del cl.instances[iid]
            return
        self._fill(inst)

    # autoscaling

    def _on_tick(self) -> None:
        cl = self.cluster
        self._tick_count += 1
        for mid in self.profiles:
            q = cl.interactive_queue[mid]
            while q:
                job = q.popleft()
                dec = route(job, cl, cl.clock)
                if dec.queued:
                    q.appendleft(job)
                    break
                if dec.evicted:
                    self.events.push(cl.clock, EventKind.EVICTION_REQUEUE, dec.evicted)
                self._kick(cl.instances[dec.instance_id])
        row_extra = {}
        for mid in self.profiles:
            if self.global_mode == "hierarchical":
                row_extra[mid] = self._hierarchical_tick(mid)
            elif self.global_mode == "baseline":
                row_extra[mid] = self._baseline_tick(mid)
            else:
                row_extra[mid] = {"ibp": self._ibp(mid)[0]}
        self._record_timeline(row_extra)

    def _ibp(self, mid):
        now = self.cluster.clock
        cands = [i for i in self.cluster.pool(mid)
                 if i.cls is not InstanceClass.BATCH and not i.draining]
        busy = sum(1 for i in cands if i.ready_at <= now and i.n_interactive() > 0)
        return ag.compute_ibp(busy, len(cands)), busy, cands

    def _hierarchical_tick(self, mid: str) -> dict:
        cl = self.cluster
        ibp, busy, cands = self._ibp(mid)
        idle = [i for i in cands if i.n_running == 0 and i.busy_until is None]
        plan = ag.interactive_plan(busy, len(cands), len(idle), self.policy, self.ac.min_interactive_instances)
        if plan > 0:
            n_mixed = sum(1 for i in cands if i.cls is InstanceClass.MIXED)
            total = len(cands)
            for _ in range(plan):
                cls = InstanceClass.MIXED if n_mixed < self.ac.mixed_fraction * (total + 1) else InstanceClass.INTERACTIVE
                try:
                    self._provision(cls, mid, ActionReason.IBP)
                except CapacityExhausted:
                    break
                total += 1
                n_mixed += cls is InstanceClass.MIXED
        elif plan < 0:
            # loading instances first, then newest
            idle.sort(key=lambda i: (i.ready_at <= cl.clock, -i.instance_id))
            for inst in idle[: -plan]:
                retire(cl, inst.instance_id, ActionReason.IBP)
        dec = self._batch_autoscale(mid, record=True)
        return {"ibp": ibp, "bbp": dec.bbp_initial, "dispatch": dec.dispatch, "unmet": int(dec.unmet)}

    def _theta(self, mid: str) -> float:
        now = self.cluster.clock
        W = self.ac.tput_window
        rates = []
        for inst in self.cluster.pool(mid):
            if inst.cls is InstanceClass.BATCH and inst.ready_at <= now - W and not inst.draining:
                rates.append(self.aux[inst.instance_id].batch_tokens / W)
        measured = float(np.mean(rates)) if rates else 0.0
        return measured if measured > 0 else self._theta_boot[mid]

    def _spare_mixed_rate(self, mid: str) -> float:
        now = self.cluster.clock
        W = self.ac.tput_window
        boot = self._theta_boot[mid]
        total = 0.0
        for inst in self.cluster.pool(mid):
            if inst.cls is not InstanceClass.MIXED or inst.draining or inst.ready_at > now:
                continue
            aux = self.aux[inst.instance_id]
            if aux.measured_batch:
                span = min(W, now - inst.ready_at)
                total += aux.batch_tokens / span if span > 0 else 0.0
            else:
                free = 1.0 - inst.n_interactive() / max(1, inst.max_batch_size)
                total += boot * max(0.0, free)
        return total

    def _batch_autoscale(self, mid: str, record: bool) -> ag.BatchDecision:
        cl = self.cluster
        now = cl.clock
        prof = self.profiles[mid]
        bq = cl.batch_queue[mid]
        groups = bq.groups()
        theta = self._theta(mid)
        batch_insts = [i for i in cl.pool(mid) if i.cls is InstanceClass.BATCH and not i.draining]
        base = self._spare_mixed_rate(mid) + theta * sum(1 for i in batch_insts if i.ready_at <= now)
        pending = [(i.ready_at - now, theta) for i in batch_insts if i.ready_at > now]
        room = (cl.gpu_cap - cl.gpus_in_use()) // prof.gpus_per_instance
        active = sum(i.n_batch() for i in cl.pool(mid))
        dec = ag.batch_scale(groups, self.out_dist[mid], ag.ThroughputEstimate(theta, self.ac.tput_window), now,
                             base_rate=base, pending=pending, load_time=prof.load_time,
                             max_new=max(0, min(room, self.ac.max_dispatch)), active_batch=active,
                             include_input=self.ac.include_input_tokens)
        if dec.bbp > 0 and room <= self.ac.max_dispatch:
            dec.unmet = True
        for _ in range(dec.dispatch):
            try:
                self._provision(InstanceClass.BATCH, mid, ActionReason.BBP)
            except CapacityExhausted:
                dec.unmet = True
                break
        if dec.retire_all:
            for inst in batch_insts:
                retire(cl, inst.instance_id, ActionReason.BBP)
        if record and groups and self._tick_count % self.cfg.estimate_every == 0:
            qsize = len(bq)
            for g, w in zip(groups, dec.estimates):
                self.estimates.append({"group_id": g.group_id, "t": now, "estimated_wait": float(w),
                                       "realized_wait": math.nan, "queue_size": qsize,
                                       "request_id": g.last_member, "model_id": mid})
        return dec

    def _baseline_tick(self, mid: str) -> dict:
        """Per-class utilization thresholds, one action per class per tick."""
        cl = self.cluster
        now = cl.clock
        out = {"ibp": self._ibp(mid)[0]}
        queues = {InstanceClass.INTERACTIVE: len(cl.interactive_queue[mid]),
                  InstanceClass.BATCH: len(cl.batch_queue[mid])}
        for cls in (InstanceClass.INTERACTIVE, InstanceClass.BATCH):
            pool = [i for i in cl.pool(mid) if i.cls is cls and not i.draining]
            ready = [i for i in pool if i.ready_at <= now]
            util = float(np.mean([i.utilization() for i in ready])) if ready else 0.0
            loading = sum(i.max_batch_size for i in pool if i.ready_at > now)
            demand = queues[cls] > loading
            idle = [i for i in ready if i.n_running == 0 and i.busy_until is None]
            keep = self.ac.min_interactive_instances if cls is InstanceClass.INTERACTIVE else 0
            if len(pool) - 1 < keep:
                idle = []
            act = ag.baseline_utilization_scale(util, self.ac.baseline_low, self.ac.baseline_high, len(idle), demand)
            if act > 0 and (pool or demand):
                try:
                    self._provision(cls, mid, ActionReason.BASELINE)
                except CapacityExhausted:
                    pass
            elif act < 0:
                victim = max(idle, key=lambda i: i.instance_id)
                retire(cl, victim.instance_id, ActionReason.BASELINE)
        return out

    def _baseline_batch_arrival(self, mid: str) -> None:
        """Scale out immediately for a batch request that found no room."""
        cl = self.cluster
        now = cl.clock
        loading = sum(i.max_batch_size for i in cl.pool(mid)
                      if i.cls is InstanceClass.BATCH and i.ready_at > now and not i.draining)
        if len(cl.batch_queue[mid]) > loading:
            try:
                self._provision(InstanceClass.BATCH, mid, ActionReason.BASELINE)
            except CapacityExhausted:
                pass

    # bookkeeping

    def _record_timeline(self, extra: dict | None = None) -> None:
        cl = self.cluster
        for mid in self.profiles:
            pool = cl.pool(mid)
            counts = {c: sum(1 for i in pool if i.cls is c) for c in InstanceClass}
            e = (extra or {}).get(mid, {})
            self.timeline.append({
                "clock": cl.clock, "model_id": mid,
                "n_interactive": counts[InstanceClass.INTERACTIVE], "n_mixed": counts[InstanceClass.MIXED],
                "n_batch": counts[InstanceClass.BATCH],
                "gpus": sum(i.profile.gpus_per_instance for i in pool),
                "queue_len_batch": len(cl.batch_queue[mid]),
                "queue_len_interactive": len(cl.interactive_queue[mid]),
                "ibp": e.get("ibp", math.nan), "bbp": e.get("bbp", 0), "dispatch": e.get("dispatch", 0),
                "unmet": e.get("unmet", 0),
                "max_batch_sizes": ";".join(f"{i.instance_id}:{i.max_batch_size}" for i in
                                            sorted(pool, key=lambda i: i.instance_id)),
            })

    def _result(self, end: float, incomplete: bool) -> RunResult:
        stat = self.cfg.itl_statistic
        records = []
        arrived = 0
        for job in self.jobs:
            r = job.request
            if r.arrival_time > end:
                continue
            arrived += 1
            done = not math.isnan(job.completion)
            mean_itl = job.sum_gap / job.n_gaps if job.n_gaps else 0.0
            itl_stat = job.max_gap if stat == "max" else mean_itl
            records.append(RequestRecord(
                r.id, r.cls.value, r.model_id, r.arrival_time, job.first_token, job.completion,
                mean_itl, job.max_gap, job.evictions, job.preemptions, r.ttft_slo, r.itl_slo,
                ttft_met=(not math.isnan(job.first_token)) and job.first_token - r.arrival_time <= r.ttft_slo,
                itl_met=done and itl_stat <= r.itl_slo,
                incomplete=not done,
            ))
        for e in self.estimates:
            job = self.jobs[e["request_id"]]
            if not math.isnan(job.started_at):
                e["realized_wait"] = job.started_at - e["t"]
        return RunResult(self.cfg, records, self.timeline, list(self.cluster.actions), self.estimates,
                         self.batch_history, self.instance_classes, end, incomplete or any(r.incomplete for r in records),
                         arrived)


def run(cfg: ScenarioConfig, requests: list[Request] | None = None) -> RunResult:
    return Simulator(cfg, requests).run()
