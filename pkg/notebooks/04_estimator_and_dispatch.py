"""
Queue-wait estimator and batch dispatch
=======================================

The batch controller predicts queue waits from tokens ahead over measured
throughput, with unseen output lengths replaced by a fitted mean. Longer
queues average out per-request noise, so R^2 climbs with queue size. The
dispatch search is then checked against brute force on random drain cases.
"""

import numpy as np

from hiscale.experiments import (batch_scale_dispatch, brute_force_dispatch, estimator_r2_table,
                                 random_drain_case)

# %% R^2 by queue size (median of 5 seeds)
for q, r2 in estimator_r2_table(seeds=range(5)).items():
    print(f"queue {q:>5}: R^2 = {r2:.3f}")

# %% minimal dispatch
rng = np.random.default_rng(7)
for _ in range(5):
    case = random_drain_case(rng, max_queue=20_000)
    print("groups", len(case.groups), "dispatch", batch_scale_dispatch(case), "oracle", brute_force_dispatch(case))
