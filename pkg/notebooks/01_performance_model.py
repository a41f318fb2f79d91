"""
Performance-model shape
=======================

How ITL and throughput of one saturated instance respond to the enforced
max batch size, for both bundled profiles. ITL grows with the batch; tokens
per second rise until the KV budget binds and preemptions set in, then fall
back and plateau.
"""

from hiscale.experiments import SWEEP_SIZES, throughput_curve
from hiscale.perfmodel import calibrate_profile

# %% sweep both profiles (about 20 s)
for name in ("small", "large"):
    tput, itl = throughput_curve(calibrate_profile(name))
    print(f"\n{name} profile")
    print(f"{'batch':>6} {'req/s':>8} {'mean ITL (s)':>13}")
    for b, t, i in zip(SWEEP_SIZES, tput, itl):
        print(f"{b:>6} {t:>8.3f} {i:>13.3f}")
