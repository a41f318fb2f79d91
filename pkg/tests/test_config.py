import pytest
import yaml

from hiscale.config import (
    BUNDLED,
    bundled_scenario,
    dump_config,
    load_config,
    parse_config,
    resolve_config,
    with_overrides,
)
from hiscale.workload import ValidationError


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_round_trip(name):
    cfg = bundled_scenario(name)
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_unknown_key_is_named():
    with pytest.raises(ValidationError, match="autoscaler.thta"):
        parse_config({"name": "x", "autoscaler": {"thta": 0.3}})


def test_unknown_model_reference():
    with pytest.raises(ValidationError, match="unknown model"):
        parse_config({"name": "x", "profiles": {"small": {"preset": "small"}}, "workload": [{"model_id": "nope", "cls": "batch",
                                                 "arrival": {"mean_rate": 1, "duration": 1}}]})


def test_overrides_and_hash():
    cfg = bundled_scenario("interactive_wa")
    changed = with_overrides(cfg, {"autoscaler.theta": 0.25, "workload.0.arrival.mean_rate": 3.0})
    assert changed.autoscaler.theta == 0.25 and changed.workload[0].arrival.mean_rate == 3.0
    assert changed.config_hash() != cfg.config_hash()
    assert with_overrides(cfg, {}).config_hash() == cfg.config_hash()
    with pytest.raises(ValidationError):
        with_overrides(cfg, {"autoscaler.nonsense": 1})
    with pytest.raises(ValidationError, match="bad override path"):
        with_overrides(cfg, {"workload.9.arrival.mean_rate": 1})


def test_load_and_resolve(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(dump_config(bundled_scenario("batch_wb")))
    assert load_config(path) == bundled_scenario("batch_wb")
    assert resolve_config("scenarios/batch_wb") == bundled_scenario("batch_wb")
    with pytest.raises(ValidationError):
        resolve_config(tmp_path / "missing.yaml")
    path.write_text("- just\n- a list\n")
    with pytest.raises(ValidationError):
        load_config(path)


def test_profile_presets_and_overrides():
    cfg = parse_config({"name": "x", "profiles": {"m": {"preset": "large", "load_time": 10.0}}})
    prof = cfg.built_profiles()["m"]
    assert prof.load_time == 10.0 and prof.gpus_per_instance == 4 and prof.model_id == "m"
