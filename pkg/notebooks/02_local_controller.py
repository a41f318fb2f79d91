"""
Local batch-size controller
===========================

One small instance, stationary Poisson load, local control only. The max
batch size settles near the largest size that keeps per-step ITL within the
SLO (b*, found offline by bisection). A relaxed 2 s SLO lets the same
controller settle an order of magnitude higher.
"""

from hiscale.experiments import controller_convergence, feasible_batch_size
from hiscale.perfmodel import calibrate_profile

# %% offline oracle
b_star = feasible_batch_size(calibrate_profile("small"), 0.2)
print("b* for a 0.2 s ITL SLO:", b_star)

# %% closed loop, interactive SLO
for seed in range(3):
    r = controller_convergence(seed=seed)
    print(f"seed {seed}: converged after {r.convergence_time:.0f} s, final limit {r.final_batch}, "
          f"steady LBP max {r.lbp_max:.2f}")
    print("   trajectory:", [b for _, b in r.history[:12]], "...")

# %% closed loop, batch SLO
r = controller_convergence(cls="batch", rate=40.0)
print(f"batch SLO: final limit {r.final_batch} ({r.final_batch / b_star:.0f}x b*)")
