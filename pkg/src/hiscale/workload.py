"""Synthetic request streams, token-length sampling, and trace I/O.

Arrivals are either a homogeneous Poisson process or a renewal process with
i.i.d. Gamma inter-arrival times (shape ``1/cv**2``, mean ``1/rate``), which is
the usual way to dial in burstiness with a single knob.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


class RequestClass(str, enum.Enum):
    INTERACTIVE = "interactive"
    BATCH = "batch"


# (ttft_slo, itl_slo) in seconds
DEFAULT_SLOS = {
    RequestClass.INTERACTIVE: (10.0, 0.2),
    RequestClass.BATCH: (3600.0, 2.0),
}


@dataclass(frozen=True)
class Request:
    """One inference job.

    ``output_tokens`` is ground truth used by the simulated backend only;
    controllers never see it for queued requests.
    """

    id: int
    arrival_time: float
    cls: RequestClass
    model_id: str
    input_tokens: int
    output_tokens: int
    ttft_slo: float
    itl_slo: float

    def __post_init__(self):
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValidationError(f"request {self.id}: token counts must be >= 1")
        if not (self.ttft_slo > 0 and self.itl_slo > 0):
            raise ValidationError(f"request {self.id}: SLOs must be positive")
        if self.arrival_time < 0 or not math.isfinite(self.arrival_time):
            raise ValidationError(f"request {self.id}: bad arrival time {self.arrival_time}")

    @property
    def deadline(self) -> float:
        return self.arrival_time + self.ttft_slo


class ArrivalProcess(str, enum.Enum):
    POISSON = "poisson"
    GAMMA = "gamma"


@dataclass(frozen=True)
class ArrivalSpec:
    process: ArrivalProcess
    mean_rate: float
    duration: float
    cv: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not self.mean_rate > 0:
            raise ValidationError(f"mean_rate must be positive, got {self.mean_rate}")
        if not self.duration > 0:
            raise ValidationError(f"duration must be positive, got {self.duration}")
        if ArrivalProcess(self.process) is ArrivalProcess.GAMMA and not self.cv >= 1:
            raise ValidationError(f"Gamma arrivals need cv >= 1, got {self.cv}")


class TokenFamily(str, enum.Enum):
    LOGNORMAL = "lognormal"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class TokenDist:
    """Joint input/output token-length distribution.

    For ``lognormal`` the params are ``(location, scale)`` of the underlying
    normal. For ``empirical`` pass ``table`` as a sequence of
    ``(input, output)`` rows; rows are resampled with replacement.
    """

    family: TokenFamily = TokenFamily.LOGNORMAL
    input_params: tuple[float, float] = (math.log(180.0), 0.9)
    output_params: tuple[float, float] = (math.log(200.0), 0.8)
    table: tuple[tuple[int, int], ...] = field(default_factory=tuple)
    seed: int = 0


def gen_arrivals(spec: ArrivalSpec) -> np.ndarray:
    """Arrival times in ``[0, duration)``, ascending, deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    mean_gap = 1.0 / spec.mean_rate
    if ArrivalProcess(spec.process) is ArrivalProcess.POISSON:
        draw = lambda n: rng.exponential(mean_gap, n)  # noqa: E731
    else:
        shape = 1.0 / spec.cv**2
        scale = mean_gap / shape
        draw = lambda n: rng.gamma(shape, scale, n)  # noqa: E731

    expected = spec.mean_rate * spec.duration
    chunk = max(16, int(expected + 6 * math.sqrt(expected) + 16))
    chunks = []
    t0 = 0.0
    while True:
        times = t0 + np.cumsum(draw(chunk))
        chunks.append(times)
        t0 = float(times[-1])
        if t0 >= spec.duration:
            break
    times = np.concatenate(chunks)
    return times[times < spec.duration]


def sample_tokens(dist: TokenDist, n: int) -> np.ndarray:
    """Draw ``n`` ``(input_tokens, output_tokens)`` rows as an ``(n, 2)`` int array."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    rng = np.random.default_rng(dist.seed)
    family = TokenFamily(dist.family)
    if family is TokenFamily.EMPIRICAL:
        table = np.asarray(dist.table, dtype=np.int64).reshape(-1, 2)
        if table.shape[0] == 0:
            raise ValidationError("empirical token table is empty")
        if (table < 1).any():
            raise ValidationError("empirical token table entries must be positive")
        return table[rng.integers(0, table.shape[0], n)]
    (mi, si), (mo, so) = dist.input_params, dist.output_params
    inp = np.rint(rng.lognormal(mi, si, n))
    out = np.rint(rng.lognormal(mo, so, n))
    return np.maximum(np.column_stack([inp, out]), 1).astype(np.int64)


def window_counts(arrivals: Sequence[float], window: float, duration: float | None = None) -> np.ndarray:
    arrivals = np.asarray(arrivals, dtype=float)
    if duration is None:
        duration = float(arrivals.max()) + 1e-12 if arrivals.size else 0.0
    n_windows = int(math.ceil(duration / window - 1e-12))
    edges = np.arange(n_windows + 1) * window
    counts, _ = np.histogram(arrivals, bins=edges)
    return counts


def spike_ratio(arrivals: Sequence[float], window: float, duration: float | None = None) -> np.ndarray:
    """Ratio of arrival counts in each window to the window before it.

    ``window`` should match the model load time. A zero-count denominator
    yields ``inf`` so bursts after a lull are never dropped.
    """
    if not window > 0:
        raise ValidationError("window must be positive")
    counts = window_counts(arrivals, window, duration)
    return ratios_from_counts(counts)


def ratios_from_counts(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    if counts.size < 2:
        raise ValidationError("spike_ratio needs at least two windows")
    num, den = counts[1:], counts[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out


def make_requests(
    arrivals: Sequence[float],
    tokens: np.ndarray,
    cls: RequestClass,
    model_id: str,
    ttft_slo: float | None = None,
    itl_slo: float | None = None,
    first_id: int = 0,
) -> list[Request]:
    d_ttft, d_itl = DEFAULT_SLOS[RequestClass(cls)]
    ttft = d_ttft if ttft_slo is None else ttft_slo
    itl = d_itl if itl_slo is None else itl_slo
    return [
        Request(first_id + i, float(t), RequestClass(cls), model_id, int(a), int(b), ttft, itl)
        for i, (t, (a, b)) in enumerate(zip(arrivals, tokens))
    ]


def merge_streams(streams: Iterable[Sequence[Request]]) -> list[Request]:
    """Merge request streams and renumber ids in arrival order.

    Ties keep stream order, so ids are a stable FCFS tiebreak.
    """
    tagged = [(r.arrival_time, si, k, r) for si, s in enumerate(streams) for k, r in enumerate(s)]
    tagged.sort(key=lambda x: x[:3])
    return [
        Request(i, r.arrival_time, r.cls, r.model_id, r.input_tokens, r.output_tokens, r.ttft_slo, r.itl_slo)
        for i, (*_, r) in enumerate(tagged)
    ]


# trace files

TRACE_HEADER = ["id", "arrival_time", "class", "model_id", "input_tokens", "output_tokens", "ttft_slo", "itl_slo"]


def format_time(x: float) -> str:
    """At least six decimals, and exact on round trip."""
    s = f"{x:.6f}"
    return s if float(s) == x else repr(float(x))


def save_trace(requests: Sequence[Request], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([
                r.id, format_time(r.arrival_time), r.cls.value, r.model_id,
                r.input_tokens, r.output_tokens, repr(float(r.ttft_slo)), repr(float(r.itl_slo)),
            ])


def load_trace(path) -> list[Request]:
    path = Path(path)
    out: list[Request] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise ValidationError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
        last_t = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(TRACE_HEADER):
                    raise ValueError(f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
                req = Request(
                    id=int(row[0]), arrival_time=float(row[1]), cls=RequestClass(row[2]),
                    model_id=row[3], input_tokens=int(row[4]), output_tokens=int(row[5]),
                    ttft_slo=float(row[6]), itl_slo=float(row[7]),
                )
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if req.arrival_time < last_t:
                raise ValidationError(f"{path}:{lineno}: arrival times must be nondecreasing")
            last_t = req.arrival_time
            out.append(req)
    return out
