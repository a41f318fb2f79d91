"""Per-instance max-batch-size controller driven by local backpressure.

Latency backpressure is observed ITL over the ITL SLO; throughput
backpressure is previous over current throughput. Their max either grows the
batch size by a proportional EWMA step or halves it.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .workload import ValidationError

BP_FLOOR = 0.25  # caps single-update growth at 1/BP_FLOOR


def compute_lbp(observed_itl: float, itl_slo: float) -> float:
    if not itl_slo > 0:
        raise ValidationError("itl_slo must be positive")
    if observed_itl < 0:
        raise ValidationError("observed_itl must be >= 0")
    return observed_itl / itl_slo


def compute_tbp(tput_prev: float, tput_curr: float) -> float:
    if tput_prev < 0 or tput_curr < 0:
        raise ValidationError("throughput must be >= 0")
    if tput_curr == 0:
        return 0.0 if tput_prev == 0 else math.inf
    return tput_prev / tput_curr


def instance_itl_slo(slos) -> float:
    """Tightest ITL SLO among the running requests."""
    slos = list(slos)
    if not slos:
        raise ValidationError("no running requests")
    return min(slos)


@dataclass
class LocalCtlState:
    instance_id: int
    max_batch_size: int = 32
    alpha: float = 0.5
    tput_prev: float = 0.0
    last_backpressure: float = 0.0
    deadband: float = 0.0
    strict_halving: bool = False
    ceiling: int = 4096

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValidationError("alpha must be in (0, 1]")
        if self.max_batch_size < 1:
            raise ValidationError("max_batch_size must be >= 1")
        if self.deadband < 0:
            raise ValidationError("deadband must be >= 0")


def update_batch_size(state: LocalCtlState, lbp: float, tbp: float) -> int:
    if lbp < 0 or tbp < 0:
        raise ValidationError("backpressure must be >= 0")
    bp = max(lbp, tbp)
    state.last_backpressure = bp
    old = state.max_batch_size
    scale_up = bp < 1.0 if state.strict_halving else bp <= 1.0 + state.deadband
    if scale_up:
        inv = 1.0 / max(bp, BP_FLOOR)
        new = round(state.alpha * inv * old + (1.0 - state.alpha) * old)
        new = min(new, state.ceiling)
    else:
        new = old // 2
    state.max_batch_size = max(1, int(new))
    return state.max_batch_size


@dataclass
class _Window:
    itl: float
    tokens: int
    dt: float
    batch: int


@dataclass
class LocalAutoscaler:
    """Feeds per-step observations into ``update_batch_size``.

    Observations are kept only for the current max-batch-size setting (at
    most ``window`` steps); a change clears them, so a decision never rests
    on samples taken under the previous setting. Throughput backpressure
    compares decode-token throughput under the current setting with the
    setting that preceded the last increase, and is only charged when that
    increase actually enlarged the running batch, and (with
    ``tbp_only_on_drop``) only when throughput actually fell: after an x%
    increase a still-rising throughput gives TBP ~ 1/(1+x), which would make
    every next step smaller and stall the limit well below the SLO bound.

    A cut keeps the reference from before the last increase
    (``keep_reference_on_cut``). Forgetting it lets the next step grow up to
    1/BP_FLOOR times again, so past a throughput peak every grow/halve cycle
    would end higher than it started.

    Before ``min_samples`` accumulate, only an LBP of at least ``urgent_bp``
    triggers a decision.

    With ``grow_when_binding`` an increase is applied only when the running
    batch reached the current limit during the window. Raising a limit that
    nothing presses against changes nothing now but leaves a large overshoot
    to unwind when load arrives.
    """

    ctl: LocalCtlState
    window: int = 20
    min_samples: int = 4
    obs: deque = field(default_factory=deque)
    prev_tput: float = 0.0
    prev_batch: float = 0.0
    history: list = field(default_factory=list)
    grow_when_binding: bool = True
    itl_stat: str = "max"
    urgent_bp: float = 2.0
    tbp_only_on_drop: bool = True
    keep_reference_on_cut: bool = True

    def observe(self, itl: float, tokens: int, dt: float, batch: int) -> None:
        self.obs.append(_Window(itl, tokens, dt, batch))
        while len(self.obs) > self.window:
            self.obs.popleft()

    def measured(self) -> tuple[float, float, float]:
        n = len(self.obs)
        if self.itl_stat == "max":
            itl = max(o.itl for o in self.obs)
        else:
            itl = sum(o.itl for o in self.obs) / n
        t = sum(o.dt for o in self.obs)
        tput = sum(o.tokens for o in self.obs) / t if t > 0 else 0.0
        batch = sum(o.batch for o in self.obs) / n
        return itl, tput, batch

    def maybe_update(self, itl_slo: float, now: float) -> int | None:
        """Returns the new max batch size when it changes, else ``None``."""
        if not self.obs:
            return None
        itl, tput, batch = self.measured()
        lbp = compute_lbp(itl, itl_slo)
        # gross overload (e.g. a tight-SLO request joined a batch-sized limit) acts at once
        if len(self.obs) < self.min_samples and lbp < self.urgent_bp:
            return None
        tbp = 0.0
        if self.prev_tput > 0 and batch > self.prev_batch + 0.5:
            tbp = compute_tbp(self.prev_tput, tput)
            # a throughput gain is no pressure; otherwise prev/curr -> 1 stalls growth
            if tbp <= 1.0 and self.tbp_only_on_drop:
                tbp = 0.0
        self.ctl.tput_prev = self.prev_tput
        old = self.ctl.max_batch_size
        if self.grow_when_binding and not self.ctl.strict_halving:
            bp = max(lbp, tbp)
            if bp <= 1.0 + self.ctl.deadband and max(o.batch for o in self.obs) < old:
                self.ctl.last_backpressure = bp
                return None
        new = update_batch_size(self.ctl, lbp, tbp)
        if new == old:
            return None
        if new > old:
            self.prev_tput, self.prev_batch = tput, batch
        elif not self.keep_reference_on_cut:
            self.prev_tput = self.prev_batch = 0.0
        self.obs.clear()
        self.history.append((now, new))
        return new
