"""
Bundled scenarios: hierarchical vs utilization baseline
=======================================================

Runs every bundled scenario under both autoscalers and prints attainment,
GPU-hours and scaling churn side by side (about 30 s).
"""

from hiscale.config import BUNDLED, bundled_scenario, with_overrides
from hiscale.engine import run
from hiscale.metrics import summarize

cols = ("interactive_combined_attainment", "batch_ttft_attainment", "gpu_hours", "per_instance_tput",
        "scale_ups", "scale_downs")
print(f"{'scenario':<18} {'arm':<13}" + "".join(f"{c[:18]:>20}" for c in cols))
for name in BUNDLED:
    cfg = bundled_scenario(name)
    for kind in ("hierarchical", "baseline"):
        s = summarize(run(with_overrides(cfg, {"autoscaler.kind": kind}))).to_dict()
        print(f"{name:<18} {kind:<13}" + "".join(f"{s[c]:>20.3f}" for c in cols))
