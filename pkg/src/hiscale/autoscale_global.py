"""Cluster-level controllers.

* Interactive scaling keeps the busy fraction of interactive+mixed instances
  (IBP) inside ``[theta - delta, theta + delta]``.
* Batch scaling clusters the batch queue into request groups by TTFT SLO,
  estimates each group's wait from the tokens queued ahead of it, and adds
  the fewest batch instances that leave no group projected past its
  deadline (BBP = 0).
* The utilization baseline keeps mean KV utilization between two thresholds,
  one instance at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .workload import ValidationError


@dataclass(frozen=True)
class OverprovisionPolicy:
    theta: float = 1.0 / 3.0
    delta: float = 0.05

    def __post_init__(self):
        if not (0 < self.theta - self.delta and self.theta + self.delta <= 1 and self.delta >= 0):
            raise ValidationError(f"need 0 < theta-delta and theta+delta <= 1, got {self.theta}, {self.delta}")

    @property
    def low(self) -> float:
        return self.theta - self.delta

    @property
    def high(self) -> float:
        return self.theta + self.delta


# interactive scaling

def compute_ibp(n_busy: int, n_total: int) -> float:
    """Busy share of interactive+mixed instances; 1.0 when there are none."""
    if n_total <= 0:
        return 1.0
    return n_busy / n_total


def interactive_plan(n_busy: int, n_total: int, n_idle: int, policy: OverprovisionPolicy, min_total: int = 1) -> int:
    """Instances to add (positive) or idle instances to retire (negative)."""
    ibp = compute_ibp(n_busy, n_total)
    if ibp > policy.high:
        n = 0
        while compute_ibp(n_busy, n_total + n) > policy.theta:
            n += 1
        return n
    if ibp < policy.low:
        k = 0
        while (
            k < n_idle
            and n_total - k - 1 >= min_total
            and compute_ibp(n_busy, n_total - k) < policy.theta
            and compute_ibp(n_busy, n_total - k - 1) <= policy.high
        ):
            k += 1
        return -k
    return 0


# request groups

@dataclass(frozen=True)
class QueuedView:
    """What a controller may see of a queued request (no output length)."""

    id: int
    arrival_time: float
    input_tokens: int
    ttft_slo: float

    @property
    def deadline(self) -> float:
        return self.arrival_time + self.ttft_slo


@dataclass
class RequestGroup:
    group_id: int
    ttft_slo: float
    members: list = field(default_factory=list)
    count: int = 0
    input_tokens: int = 0
    earliest_deadline: float = math.inf
    last_member: int | None = None

    @property
    def total_queued_tokens(self) -> int:
        return self.input_tokens

    def add(self, view: QueuedView) -> None:
        self.members.append(view)
        self.count += 1
        self.input_tokens += view.input_tokens
        self.earliest_deadline = min(self.earliest_deadline, view.deadline)
        self.last_member = view.id


def form_request_groups(queue: Sequence[QueuedView], tolerance: float = 60.0) -> list[RequestGroup]:
    """Single-pass 1-D clustering on TTFT SLO; groups sorted by earliest deadline."""
    groups: list[RequestGroup] = []
    for view in queue:
        for g in groups:
            if abs(view.ttft_slo - g.ttft_slo) <= tolerance:
                g.add(view)
                break
        else:
            g = RequestGroup(len(groups), view.ttft_slo)
            g.add(view)
            groups.append(g)
    groups.sort(key=lambda g: (g.earliest_deadline, g.group_id))
    return groups


# output-length model

@dataclass
class OutputDist:
    """Running mean/std of completed output lengths, blended with a prior.

    Welford's update keeps it one-pass and stable. Below ``washout``
    observations the prior keeps weight ``1 - n/washout``.
    """

    prior_mu: float = 250.0
    prior_sigma: float = 200.0
    washout: int = 30
    n: int = 0
    _mean: float = 0.0
    _m2: float = 0.0

    def update(self, x: float) -> None:
        self.n += 1
        d = x - self._mean
        self._mean += d / self.n
        self._m2 += d * (x - self._mean)

    def _weight(self) -> float:
        return min(1.0, self.n / self.washout)

    @property
    def mu_o(self) -> float:
        w = self._weight()
        return w * self._mean + (1 - w) * self.prior_mu

    @property
    def sigma_o(self) -> float:
        w = self._weight()
        sample = math.sqrt(self._m2 / self.n) if self.n else 0.0
        return w * sample + (1 - w) * self.prior_sigma


def fit_output_distribution(values, prior: tuple[float, float] = (250.0, 200.0), washout: int = 30) -> OutputDist:
    dist = OutputDist(prior_mu=prior[0], prior_sigma=prior[1], washout=washout)
    for v in values:
        dist.update(float(v))
    return dist


@dataclass
class ThroughputEstimate:
    """Decode tokens/s one batch-serving instance sustains."""

    theta_tput: float
    window: float = 30.0


# waiting-time estimation

def estimate_waiting_time(tokens_ahead: float, capacity: ThroughputEstimate, serving_instances: int) -> float:
    """Queue wait as tokens ahead over aggregate token throughput."""
    if not capacity.theta_tput > 0:
        raise ValidationError("throughput must be positive")
    if serving_instances < 1:
        raise ValidationError("need at least one serving instance")
    return tokens_ahead / (capacity.theta_tput * serving_instances)


def drain_time(tokens: float, base_rate: float, ramps: Sequence[tuple[float, float]] = ()) -> float:
    """Time until ``tokens`` are processed by a step-wise growing capacity.

    Capacity starts at ``base_rate`` tokens/s and each ``(offset, rate)`` ramp
    adds ``rate`` once ``offset`` seconds have passed.
    """
    if tokens <= 0:
        return 0.0
    t, rate, left = 0.0, base_rate, float(tokens)
    for offset, extra in sorted((max(0.0, o), r) for o, r in ramps if r > 0):
        if offset > t:
            if rate > 0 and left <= rate * (offset - t):
                return t + left / rate
            left -= rate * (offset - t)
            t = offset
        rate += extra
    return t + left / rate if rate > 0 else math.inf


def group_tokens_ahead(groups: Sequence[RequestGroup], mu_o: float, include_input: bool = False) -> np.ndarray:
    """Estimated tokens queued ahead of each group's last member, in group order."""
    counts = np.array([g.count for g in groups], dtype=float)
    per = np.full(len(groups), mu_o)
    if include_input:
        inputs = np.array([g.input_tokens for g in groups], dtype=float)
        per_group = counts * mu_o + inputs
        mean_in = np.divide(inputs, counts, out=np.zeros_like(inputs), where=counts > 0)
        per = per + mean_in
    else:
        per_group = counts * mu_o
    before = np.concatenate([[0.0], np.cumsum(per_group)[:-1]])
    return before + np.maximum(counts - 1, 0) * per


def compute_bbp(groups: Sequence[RequestGroup], estimates: Sequence[float], now: float) -> int:
    """Groups whose projected start falls past their earliest deadline."""
    if len(groups) != len(estimates):
        raise ValidationError("estimates must align with groups")
    return sum(1 for g, w in zip(groups, estimates) if now + w > g.earliest_deadline)


@dataclass
class BatchDecision:
    dispatch: int
    bbp_initial: int
    bbp: int
    estimates: list
    unmet: bool = False
    retire_all: bool = False


def batch_scale(
    groups: Sequence[RequestGroup],
    out_dist: OutputDist,
    capacity: ThroughputEstimate,
    now: float,
    *,
    base_rate: float = 0.0,
    pending: Sequence[tuple[float, float]] = (),
    load_time: float = 0.0,
    max_new: int = 64,
    active_batch: int = 0,
    include_input: bool = False,
) -> BatchDecision:
    """Fewest new batch instances that bring BBP to zero.

    ``base_rate`` is token capacity already serving batch work (spare mixed
    capacity plus ready batch instances); ``pending`` lists ``(seconds until
    ready, rate)`` for instances still loading. Each hypothetical new
    instance adds ``capacity.theta_tput`` after ``load_time``.
    """
    if not groups:
        return BatchDecision(0, 0, 0, [], retire_all=active_batch == 0)
    ahead = group_tokens_ahead(groups, out_dist.mu_o, include_input)
    theta = capacity.theta_tput

    def estimates_for(d):
        ramps = list(pending) + ([(load_time, d * theta)] if d else [])
        return [drain_time(t, base_rate, ramps) for t in ahead]

    est = estimates_for(0)
    bbp0 = bbp = compute_bbp(groups, est, now)
    d = 0
    while bbp > 0 and d < max_new:
        d += 1
        est = estimates_for(d)
        bbp = compute_bbp(groups, est, now)
    return BatchDecision(d, bbp0, bbp, est, unmet=bbp > 0)


# utilization baseline

def baseline_utilization_scale(avg_util: float, low: float, high: float, n_idle: int, demand: bool = False) -> int:
    """+1 to add an instance, -1 to retire an idle one, 0 to hold."""
    if not 0 <= low < high <= 1:
        raise ValidationError("need 0 <= low < high <= 1")
    if avg_util > high or demand:
        return 1
    if avg_util < low and n_idle > 0:
        return -1
    return 0
