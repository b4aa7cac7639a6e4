"""Evaluate a trained checkpoint the way the study does: value-vs-survival
calibration, the 70-130% safe-dose rate, dose-difference mortality, and
per-timestep dose curves, all on a held-out synthetic cohort.

Expects the checkpoint from demos/03_train_policy.py; trains a quick one
if it is missing.

Run:  python3 demos/04_evaluate_policy.py
"""

import os

from batchrx.agent import Agent, Hyperparameters, train
from batchrx.cohort import Normalizer, TransitionBuffer
from batchrx.evaluate import (
    default_epsilons,
    dose_difference_mortality,
    dose_distribution,
    q_survival_calibration,
    recommend_on_cohort,
    safe_rate,
)
from batchrx.simulator import SimParams, generate_cohort

CKPT = "/tmp/demo_agent.bxp"

params = SimParams()
if os.path.exists(CKPT):
    agent, normalizer = Agent.load(CKPT)
    print(f"loaded {CKPT}")
else:
    print("no checkpoint found; training a quick agent first ...")
    cohort = generate_cohort(params, 400, seed=0)
    normalizer = Normalizer.fit(cohort)
    agent, _ = train(TransitionBuffer(cohort, normalizer),
                     Hyperparameters(seed=0, epochs=2500))

test_cohort = generate_cohort(params, 300, seed=1)
print(f"held-out cohort: {test_cohort.n_patients} patients, "
      f"{test_cohort.n_steps} steps")

# ----------------------------------------------------------------------
# 1. Calibration: group the critic's value of each logged (history,
#    action) pair into bins; survival should rise with the bin.
# ----------------------------------------------------------------------
bins, rho = q_survival_calibration(agent, normalizer, test_cohort)
print(f"\nvalue-vs-survival calibration (rank correlation {rho:.3f}):")
for b in bins:
    if b.count >= 10:
        bar = "#" * int(round(40 * b.survival_rate))
        print(f"  Q in [{b.lo:7.2f},{b.hi:7.2f})  n={b.count:5d}  "
              f"{b.survival_rate:5.1%} {bar}")

# ----------------------------------------------------------------------
# 2. Recommendations at every logged step, from the same history the
#    clinician saw, then the safety band and difference analyses.
# ----------------------------------------------------------------------
recommended, logged, meta = recommend_on_cohort(agent, normalizer,
                                                test_cohort, seed=3)
eps = default_epsilons(normalizer.caps)
report = safe_rate(recommended, logged, meta, test_cohort, eps)
print(f"\nsafe rate (every component within 70-130% of the clinician, "
      f"zero doses within {eps.round(3).tolist()}):")
print(f"  overall {report.overall:.3f}  by component "
      f"{ {k: round(v, 3) for k, v in report.marginal.items()} }")

print("\nmortality by (recommended - clinician) class-1 pressor dose:")
for b in dose_difference_mortality(recommended, logged, meta, test_cohort, 1):
    if b.count:
        print(f"  diff [{b.lo:6.2f},{b.hi:6.2f})  n={b.count:5d}  "
              f"mortality {b.mortality:5.1%}")

rows = dose_distribution(recommended, logged, meta, eps)
print("\nmean class-1 pressor dose by window (clinician vs agent):")
for r in rows:
    if r["component"] == "vaso1":
        print(f"  t={r['t']:2d}  clinician {r['clinician_mean']:.3f}  "
              f"agent {r['agent_mean']:.3f}")
