"""Generate a synthetic ICU-style cohort and look inside it: latent
severity, observed trajectories, the noisy clinician heuristics, and the
CSV round trip.

Run:  python3 demos/02_simulate_cohort.py
"""

import numpy as np

from batchrx.cohort import IDX_LACTATE, IDX_MAP, IDX_SOFA, load_cohort, write_cohort_csv
from batchrx.simulator import SimParams, generate_cohort, simulate_cohort

params = SimParams()

# ----------------------------------------------------------------------
# 1. One patient in detail: 12 two-hour windows of (observation, dose).
# ----------------------------------------------------------------------
patient = simulate_cohort(params, 1, seed=42)[0]
ep = patient.episode
print(f"patient {ep.patient_id}: survived={ep.survived} "
      f"(model survival prob {patient.survival_prob:.2f})")
print(" t   sev    MAP   SOFA  lact |  fluid   v1     v2     v3   hc | reward")
for t in range(ep.length):
    o, a = ep.observations[t], ep.actions[t]
    sev = patient.latents[t].severity
    print(f"{t:2d}  {sev:5.2f}  {o[IDX_MAP]:5.1f}  {o[IDX_SOFA]:5.1f} "
          f"{o[IDX_LACTATE]:5.2f} | {a[0]:6.0f} {a[1]:6.3f} {a[2]:6.3f} "
          f"{a[3]:6.3f} {a[4]:3.0f} | {ep.rewards[t]:6.2f}")

# ----------------------------------------------------------------------
# 2. Cohort-level texture: survival rate and dosing frequencies.
# ----------------------------------------------------------------------
cohort = generate_cohort(params, 300, seed=0)
acts = np.vstack([e.actions for e in cohort.episodes])
surv = np.mean([e.survived for e in cohort.episodes])
print(f"\n300 patients: survival {surv:.3f}")
print(f"  steps with class-1 pressor: {(acts[:, 1] > 0).mean():.0%}")
print(f"  steps with class-3 pressor: {(acts[:, 3] > 0).mean():.0%}")
print(f"  steps with hydrocortisone:  {(acts[:, 4] > 0).mean():.0%}")

# ----------------------------------------------------------------------
# 3. The CSV is the exchange format; it validates cleanly on re-load.
# ----------------------------------------------------------------------
path = "/tmp/demo_cohort.csv"
rows = write_cohort_csv(cohort, path)
loaded = load_cohort(path)
print(f"\nwrote {rows} rows to {path}; reloaded {loaded.n_patients} patients, "
      f"warnings: {loaded.warnings or 'none'}")
