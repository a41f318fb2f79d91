"""Parametric model of one continuous-batching serving instance.

Decode step latency is linear in the KV tokens attended over; prefill is
linear in prompt tokens. KV memory is a hard budget: when a decode step would
overflow it, the most recently admitted requests are preempted. The stall
and lost work from those preemptions is what bends throughput down past the
KV-bound batch size.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .workload import Request, RequestClass, ValidationError


class ContractViolation(RuntimeError):
    pass


class InstanceClass(str, enum.Enum):
    INTERACTIVE = "interactive"
    MIXED = "mixed"
    BATCH = "batch"


class Admission(str, enum.Enum):
    ADMITTED = "admitted"
    REJECTED_BATCH_FULL = "rejected_batch_full"
    REJECTED_MEMORY = "rejected_memory"
    REJECTED_NOT_READY = "rejected_not_ready"


@dataclass(frozen=True)
class PerfProfile:
    model_id: str
    prefill_rate: float  # tokens/s
    decode_base: float  # s per step
    decode_per_token: float  # s per KV token per step
    kv_capacity: int  # tokens
    preempt_penalty: float  # s of stall per preemption
    recompute_on_restart: bool = True
    load_time: float = 30.0
    gpus_per_instance: int = 1
    # prompt tokens prefilled per iteration (0: no limit); the oldest pending
    # prompt always runs, later ones wait for a following iteration
    max_prefill_tokens: int = 0

    def __post_init__(self):
        for name in ("prefill_rate", "decode_base", "decode_per_token", "preempt_penalty", "load_time"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"profile {self.model_id}: {name} must be positive")
        if self.kv_capacity < 2:
            raise ValidationError(f"profile {self.model_id}: kv_capacity too small")
        if self.gpus_per_instance < 1:
            raise ValidationError(f"profile {self.model_id}: gpus_per_instance must be >= 1")
        if self.max_prefill_tokens < 0:
            raise ValidationError(f"profile {self.model_id}: max_prefill_tokens must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def decode_step_time(profile: PerfProfile, active_kv: float) -> float:
    return profile.decode_base + profile.decode_per_token * active_kv


def prefill_time(profile: PerfProfile, prompt_tokens: int) -> float:
    if prompt_tokens < 1:
        raise ContractViolation("prefill needs at least one prompt token")
    return prompt_tokens / profile.prefill_rate


_PROFILES = {
    "small": dict(
        model_id="small", prefill_rate=50000.0, decode_base=0.12, decode_per_token=1.25e-6,
        kv_capacity=200_000, preempt_penalty=0.05, recompute_on_restart=True, load_time=20.0,
        gpus_per_instance=1, max_prefill_tokens=2048,
    ),
    "large": dict(
        model_id="large", prefill_rate=10000.0, decode_base=0.9, decode_per_token=8.0e-6,
        kv_capacity=80_000, preempt_penalty=0.6, recompute_on_restart=True, load_time=45.0,
        gpus_per_instance=4, max_prefill_tokens=2048,
    ),
}


def calibrate_profile(name: str, **overrides) -> PerfProfile:
    """Bundled profiles: ``"small"`` (8B-class) and ``"large"`` (70B-class).

    Only curve shapes are calibrated: ITL rises with batch size, throughput
    peaks where the KV budget binds, and large-model steps cost about 10x the
    small-model ones.
    """
    key = name.lower().replace("model", "").strip("_ ")
    if key not in _PROFILES:
        raise ValidationError(f"unknown profile {name!r}; choose from {sorted(_PROFILES)}")
    params = dict(_PROFILES[key])
    params.update(overrides)
    return PerfProfile(**params)


@dataclass
class Job:
    """A request plus its serving progress; survives preemption and re-queueing."""

    request: Request
    generated: int = 0
    first_token: float = math.nan
    completion: float = math.nan
    last_token: float = math.nan
    max_gap: float = 0.0
    sum_gap: float = 0.0
    n_gaps: int = 0
    evictions: int = 0
    preemptions: int = 0
    kv_home: int | None = None  # instance holding a saved copy of this job's KV
    admitted_at: float = math.nan
    started_at: float = math.nan  # first admission, for realized queue waits
    instance: int | None = None
    served_by: int | None = None  # last instance that admitted this job

    @property
    def id(self) -> int:
        return self.request.id

    @property
    def is_batch(self) -> bool:
        return self.request.cls is RequestClass.BATCH

    @property
    def context(self) -> int:
        return self.request.input_tokens + self.generated


class RunningSet:
    """Columnar storage for the jobs on one instance, in admission order."""

    _FIELDS = {
        "inp": np.int64, "out": np.int64, "gen": np.int64, "prefill": np.int64,
        "slo": np.float64, "batch": np.bool_, "last": np.float64,
        "max_gap": np.float64, "sum_gap": np.float64, "n_gaps": np.int64,
    }

    def __init__(self, capacity: int = 64):
        self.n = 0
        self.jobs: list[Job] = []
        for name, dt in self._FIELDS.items():
            setattr(self, name, np.zeros(capacity, dtype=dt))

    def __len__(self) -> int:
        return self.n

    def _grow(self) -> None:
        for name in self._FIELDS:
            arr = getattr(self, name)
            new = np.zeros(max(64, 2 * arr.size), dtype=arr.dtype)
            new[: self.n] = arr[: self.n]
            setattr(self, name, new)

    def append(self, job: Job, prefill_tokens: int) -> None:
        if self.n == self.inp.size:
            self._grow()
        i = self.n
        r = job.request
        self.inp[i] = r.input_tokens
        self.out[i] = r.output_tokens
        self.gen[i] = job.generated
        self.prefill[i] = prefill_tokens
        self.slo[i] = r.itl_slo
        self.batch[i] = job.is_batch
        self.last[i] = job.last_token
        self.max_gap[i] = job.max_gap
        self.sum_gap[i] = job.sum_gap
        self.n_gaps[i] = job.n_gaps
        self.jobs.append(job)
        self.n += 1

    def _sync(self, i: int) -> Job:
        job = self.jobs[i]
        job.generated = int(self.gen[i])
        job.last_token = float(self.last[i])
        job.max_gap = float(self.max_gap[i])
        job.sum_gap = float(self.sum_gap[i])
        job.n_gaps = int(self.n_gaps[i])
        return job

    def pop(self, i: int) -> Job:
        job = self._sync(i)
        last = self.n - 1
        if i != last:
            for name in self._FIELDS:
                arr = getattr(self, name)
                arr[i:last] = arr[i + 1 : self.n]
        del self.jobs[i]
        self.n -= 1
        return job

    def remove_mask(self, mask: np.ndarray) -> list[Job]:
        """Remove jobs where ``mask`` is true; returns them in admission order."""
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return []
        gone = [self._sync(int(i)) for i in idx]
        keep = ~mask
        k = int(keep.sum())
        for name in self._FIELDS:
            arr = getattr(self, name)
            arr[:k] = arr[: self.n][keep]
        self.jobs = [j for j, kp in zip(self.jobs, keep) if kp]
        self.n = k
        return gone

    def kv_total(self) -> int:
        n = self.n
        return int(self.inp[:n].sum() + self.gen[:n].sum())


@dataclass
class InstanceState:
    instance_id: int
    cls: InstanceClass
    profile: PerfProfile
    max_batch_size: int = 32
    ready_at: float = 0.0
    draining: bool = False
    kv_used: int = 0
    running: RunningSet = field(default_factory=RunningSet)
    busy_until: float | None = None  # end of the in-flight iteration
    created_at: float = 0.0

    def __post_init__(self):
        if self.max_batch_size < 1:
            raise ValidationError("max_batch_size must be >= 1")

    @property
    def n_running(self) -> int:
        return self.running.n

    def is_ready(self, now: float) -> bool:
        return now >= self.ready_at

    def n_interactive(self) -> int:
        n = self.running.n
        return n - int(self.running.batch[:n].sum())

    def n_batch(self) -> int:
        return int(self.running.batch[: self.running.n].sum())

    def utilization(self) -> float:
        return self.kv_used / self.profile.kv_capacity


def kv_need(job: Job) -> int:
    return job.context + 1


def admit(state: InstanceState, job: Job, now: float) -> Admission:
    """Try to add ``job`` to the running batch; rejection is a return value."""
    if now < state.ready_at or state.draining:
        return Admission.REJECTED_NOT_READY
    if state.running.n >= state.max_batch_size:
        return Admission.REJECTED_BATCH_FULL
    if state.kv_used + kv_need(job) > state.profile.kv_capacity:
        return Admission.REJECTED_MEMORY
    restore = job.kv_home == state.instance_id and job.generated > 0
    prefill = 0 if restore else job.context
    state.running.append(job, prefill)
    state.kv_used += job.context
    job.kv_home = None
    job.instance = job.served_by = state.instance_id
    job.admitted_at = now
    if math.isnan(job.started_at):
        job.started_at = now
    return Admission.ADMITTED


def _detach(state: InstanceState, i: int, keep_kv: bool) -> Job:
    """Remove running job ``i`` because of preemption or eviction."""
    job = state.running.pop(i)
    state.kv_used -= job.context
    job.instance = None
    if keep_kv:
        job.kv_home = state.instance_id
    elif state.profile.recompute_on_restart:
        job.generated = 0
        job.kv_home = None
    return job


def preempt_last(state: InstanceState, keep_kv: bool = False) -> Job:
    job = _detach(state, state.running.n - 1, keep_kv)
    job.preemptions += 1
    return job


def shrink_to(state: InstanceState, size: int, batch_only: bool = False) -> list[Job]:
    """Preempt the newest jobs until at most ``size`` run. KV is swapped out, not lost.

    With ``batch_only`` only batch jobs are candidates; interactive jobs above
    the limit keep running and drain naturally.
    """
    out = []
    rs = state.running
    while rs.n > size:
        if batch_only:
            idx = np.flatnonzero(rs.batch[: rs.n])
            if idx.size == 0:
                break
            job = _detach(state, int(idx[-1]), keep_kv=True)
            job.preemptions += 1
        else:
            job = preempt_last(state, keep_kv=True)
        out.append(job)
    return out


def evict_for_interactive(state: InstanceState, needed_kv: int) -> list[Job]:
    """Evict the newest batch jobs from a mixed instance to fit one interactive job.

    Victims keep their KV (saved host-side), so a restart on this instance skips
    prefill. Returns ``[]`` if even evicting every batch job would not make room.
    """
    if state.cls is not InstanceClass.MIXED:
        raise ContractViolation("only mixed instances evict batch work")
    rs = state.running
    cap = state.profile.kv_capacity

    def fits(kv, n):
        return kv + needed_kv <= cap and n + 1 <= state.max_batch_size

    if fits(state.kv_used, rs.n):
        return []
    batch_idx = np.flatnonzero(rs.batch[: rs.n])
    if batch_idx.size == 0:
        return []
    batch_kv = int(rs.inp[batch_idx].sum() + rs.gen[batch_idx].sum())
    if not fits(state.kv_used - batch_kv, rs.n - batch_idx.size):
        return []
    victims = []
    for i in batch_idx[::-1]:
        if fits(state.kv_used, rs.n):
            break
        job = _detach(state, int(i), keep_kv=True)
        job.evictions += 1
        victims.append(job)
    return victims


@dataclass
class StepResult:
    start: float
    next_event_time: float
    completions: list[Job]
    preemptions: list[Job]
    first_tokens: list[Job]
    observed_itl: float
    decode_tokens: int
    decode_tokens_batch: int
    n_decoding: int


def step(state: InstanceState, now: float) -> StepResult:
    """Run one iteration: prefill newly admitted jobs, decode one token for the rest.

    Mutates ``state`` to its post-iteration contents; the caller holds the
    result until ``next_event_time``.
    """
    rs = state.running
    if rs.n == 0:
        raise ContractViolation(f"instance {state.instance_id}: step on empty batch")
    prof = state.profile

    preempted = []
    while rs.n:
        n_dec = int((rs.prefill[: rs.n] == 0).sum())
        if state.kv_used + n_dec <= prof.kv_capacity:
            break
        preempted.append(preempt_last(state))
    stall = len(preempted) * prof.preempt_penalty

    n = rs.n
    if n == 0:
        return StepResult(now, now + stall, [], preempted, [], stall, 0, 0, 0)

    waiting = rs.prefill[:n] > 0
    pre = waiting
    if prof.max_prefill_tokens and waiting.any():
        cum = np.cumsum(np.where(waiting, rs.prefill[:n], 0))
        pre = waiting & ((cum <= prof.max_prefill_tokens) | (cum == cum[np.argmax(waiting)]))
    dec = ~waiting
    n_dec = int(dec.sum())
    rs.gen[:n][dec] += 1
    state.kv_used += n_dec

    dt = stall
    if n_dec:
        dec_kv = int(rs.inp[:n][dec].sum() + rs.gen[:n][dec].sum())
        dt += decode_step_time(prof, dec_kv)
    n_pre_tokens = int(rs.prefill[:n][pre].sum())
    if n_pre_tokens:
        dt += n_pre_tokens / prof.prefill_rate
    t_end = now + dt

    if n_dec:
        gap = t_end - rs.last[:n][dec]
        rs.max_gap[:n][dec] = np.maximum(rs.max_gap[:n][dec], gap)
        rs.sum_gap[:n][dec] += gap
        rs.n_gaps[:n][dec] += 1
    first = []
    if n_pre_tokens:
        idx = np.flatnonzero(pre)
        for i in idx:
            job = rs.jobs[i]
            if math.isnan(job.first_token):
                job.first_token = t_end
                first.append(job)
        rs.prefill[:n][pre] = 0
    # re-prefilled jobs keep their old last-token time so the outage shows up as a gap
    rs.last[:n][dec | (pre & np.isnan(rs.last[:n]))] = t_end

    dec_batch = int(rs.batch[:n][dec].sum())
    done = dec & (rs.gen[:n] >= rs.out[:n])
    completions = rs.remove_mask(done)
    for job in completions:
        state.kv_used -= job.context
        job.completion = t_end
        job.instance = None

    return StepResult(now, t_end, completions, preempted, first, dt, n_dec, dec_batch, n_dec)


def sweep_throughput(profile: PerfProfile, batch_size: int, dist=None, n_requests: int = 1500, seed: int = 0):
    """Saturated throughput of one instance held at a fixed max batch size.

    Runs a closed backlog of requests through ``step`` and returns
    ``(completed requests/s, decode tokens/s, mean observed ITL)`` measured
    after the first quarter of completions.
    """
    from .workload import TokenDist, sample_tokens, make_requests

    dist = dist or TokenDist(seed=seed)
    toks = sample_tokens(dist, n_requests)
    reqs = make_requests(np.zeros(n_requests), toks, RequestClass.BATCH, profile.model_id)
    backlog = [Job(r) for r in reversed(reqs)]
    st = InstanceState(0, InstanceClass.BATCH, profile, max_batch_size=batch_size)
    now = 0.0
    done = 0
    skip = n_requests // 4
    t_mark = tokens = 0
    itls = []
    while (backlog or st.n_running) and done < n_requests * 0.9:
        while backlog and admit(st, backlog[-1], now) is Admission.ADMITTED:
            backlog.pop()
        res = step(st, now)
        now = res.next_event_time
        backlog.extend(reversed(res.preemptions))
        done += len(res.completions)
        if done >= skip:
            if not t_mark:
                t_mark, mark_done = now, done
            tokens += res.decode_tokens
            if res.n_decoding:
                itls.append(res.observed_itl)
    elapsed = now - t_mark
    if not t_mark or elapsed <= 0:
        return 0.0, 0.0, float("nan")
    return (done - mark_done) / elapsed, tokens / elapsed, float(np.mean(itls))
