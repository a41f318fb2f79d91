"""Scenario configuration: strict schema, YAML in and out.

Unknown keys are rejected at every level so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from .perfmodel import PerfProfile, calibrate_profile
from .workload import ArrivalProcess, RequestClass, TokenFamily, ValidationError


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class AutoscalerKind(str, Enum):
    HIERARCHICAL = "hierarchical"
    BASELINE = "baseline"
    LOCAL_ONLY = "local_only"
    GLOBAL_ONLY = "global_only"
    STATIC = "static"


class ProfileConfig(Strict):
    preset: Optional[Literal["small", "large"]] = None
    prefill_rate: Optional[float] = None
    decode_base: Optional[float] = None
    decode_per_token: Optional[float] = None
    kv_capacity: Optional[int] = None
    preempt_penalty: Optional[float] = None
    recompute_on_restart: Optional[bool] = None
    load_time: Optional[float] = None
    gpus_per_instance: Optional[int] = None
    max_prefill_tokens: Optional[int] = None

    def build(self, model_id: str) -> PerfProfile:
        overrides = {k: v for k, v in self.model_dump(exclude={"preset"}).items() if v is not None}
        if self.preset is not None:
            return calibrate_profile(self.preset, model_id=model_id, **overrides)
        return PerfProfile(model_id=model_id, **overrides)


class ArrivalConfig(Strict):
    process: ArrivalProcess = ArrivalProcess.POISSON
    mean_rate: float
    duration: float
    cv: float = 1.0
    start: float = 0.0


class TokenConfig(Strict):
    family: TokenFamily = TokenFamily.LOGNORMAL
    input: tuple[float, float] = (math.log(180.0), 0.9)
    output: tuple[float, float] = (math.log(200.0), 0.8)
    table: list[tuple[int, int]] = Field(default_factory=list)


class StreamConfig(Strict):
    model_id: str
    cls: RequestClass
    arrival: ArrivalConfig
    tokens: TokenConfig = Field(default_factory=TokenConfig)
    ttft_slo: Optional[float] = None
    itl_slo: Optional[float] = None


class InjectionConfig(Strict):
    """A batch of requests that all land in the queue at ``time``."""

    time: float
    count: int
    model_id: str
    cls: RequestClass = RequestClass.BATCH
    tokens: TokenConfig = Field(default_factory=TokenConfig)
    ttft_slo: Optional[float] = None
    itl_slo: Optional[float] = None


class InitialConfig(Strict):
    model_id: str
    interactive: int = 0
    mixed: int = 0
    batch: int = 0


class AutoscalerConfig(Strict):
    kind: AutoscalerKind = AutoscalerKind.HIERARCHICAL
    local_control: Optional[bool] = None  # None: implied by kind
    theta: float = 1.0 / 3.0
    delta: float = 0.05
    alpha: float = 0.5
    deadband: float = 0.1
    strict_halving: bool = False
    tolerance: float = 60.0
    baseline_low: float = 0.3
    baseline_high: float = 0.8
    static_batch_size: int = 64
    initial_batch_size: int = 32
    max_batch_ceiling: int = 4096
    itl_window: int = 60
    min_itl_samples: int = 30
    grow_when_binding: bool = True
    observed_itl: Literal["max", "mean"] = "max"
    shrink_preempts: Literal["none", "batch", "all"] = "batch"
    urgent_backpressure: float = 2.0
    slo_headroom: float = 0.85  # controller steers to this fraction of the ITL SLO
    mixed_fraction: float = 0.5
    min_interactive_instances: int = 1
    output_prior: tuple[float, float] = (250.0, 200.0)
    include_input_tokens: bool = False
    tput_window: float = 30.0
    max_dispatch: int = 64


class ScenarioConfig(Strict):
    name: str
    seed: int = 0
    horizon: float = 3600.0
    gpu_cap: int = 50
    tick: float = 1.0
    warmup: float = 30.0
    itl_statistic: Literal["max", "mean"] = "max"
    estimate_every: int = 10
    profiles: dict[str, ProfileConfig]
    workload: list[StreamConfig] = Field(default_factory=list)
    injections: list[InjectionConfig] = Field(default_factory=list)
    initial: list[InitialConfig] = Field(default_factory=list)
    autoscaler: AutoscalerConfig = Field(default_factory=AutoscalerConfig)
    outputs: Optional[str] = None

    @model_validator(mode="after")
    def _check_models(self):
        known = set(self.profiles)
        used = {s.model_id for s in self.workload} | {i.model_id for i in self.injections} | {i.model_id for i in self.initial}
        missing = used - known
        if missing:
            raise ValueError(f"streams reference unknown model(s) {sorted(missing)}")
        if self.horizon <= 0 or self.tick <= 0:
            raise ValueError("horizon and tick must be positive")
        if self.gpu_cap < 1:
            raise ValueError("gpu_cap must be >= 1")
        return self

    def built_profiles(self) -> dict[str, PerfProfile]:
        return {mid: p.build(mid) for mid, p in self.profiles.items()}

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _format_error(exc: PydanticValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key '{loc}'")
        else:
            parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except PydanticValidationError as exc:
        raise ValidationError(_format_error(exc)) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if path.is_dir():
        path = path / "scenario.yaml"
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a mapping at top level")
    return parse_config(data)


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def with_overrides(cfg: ScenarioConfig, overrides: dict) -> ScenarioConfig:
    """Apply dotted-path overrides such as ``{"autoscaler.theta": 0.25}``.

    Integer path components index into lists (``workload.0.arrival.mean_rate``).
    """
    data = copy.deepcopy(cfg.to_dict())
    for dotted, value in overrides.items():
        node = data
        keys = dotted.split(".")
        try:
            for k in keys[:-1]:
                node = node[int(k)] if isinstance(node, list) else node.setdefault(k, {})
            last = keys[-1]
            if isinstance(node, list):
                node[int(last)] = value
            elif isinstance(node, dict):
                node[last] = value
            else:
                raise TypeError(f"'{dotted}' descends into a scalar")
        except (ValueError, IndexError, TypeError) as exc:
            raise ValidationError(f"bad override path '{dotted}': {exc}") from None
    return parse_config(data)


BUNDLED = ("interactive_wa", "batch_wb", "hysteresis_demo", "burstiness", "appendix_workflow")


def bundled_scenario(name: str) -> ScenarioConfig:
    ref = resources.files("hiscale") / "scenarios" / name / "scenario.yaml"
    if not ref.is_file():
        raise ValidationError(f"no bundled scenario {name!r}; choose from {list(BUNDLED)}")
    return parse_config(yaml.safe_load(ref.read_text()))


def resolve_config(path_or_name) -> ScenarioConfig:
    """Load a config file, or a bundled scenario by name or ``scenarios/<name>`` path."""
    p = Path(path_or_name)
    if p.exists():
        return load_config(p)
    name = p.name
    if name in BUNDLED:
        return bundled_scenario(name)
    raise ValidationError(f"config not found: {path_or_name}")
