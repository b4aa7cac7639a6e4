"""Train the batch-constrained recurrent agent on a small synthetic
cohort and watch what each piece learns.  Desk-scale settings so the whole
script runs in about two minutes; pass --full for the documented defaults
(2000 patients, 10000 epochs, ~10 minutes on one core).

Run:  python3 demos/03_train_policy.py [--full]
"""

import sys
import time

import numpy as np

from batchrx.agent import AgentPolicy, Hyperparameters, train
from batchrx.cohort import Normalizer, TransitionBuffer
from batchrx.simulator import BehaviorPolicyAdapter, SimParams, generate_cohort, monte_carlo_q

full = "--full" in sys.argv
n_patients = 2000 if full else 400
hyper = Hyperparameters(seed=0) if full else Hyperparameters(seed=0, epochs=2500)

params = SimParams()
print(f"simulating {n_patients} patients ...")
cohort = generate_cohort(params, n_patients, seed=0)
normalizer = Normalizer.fit(cohort)
buffer = TransitionBuffer(cohort, normalizer)
print(f"buffer holds {len(buffer)} history-prefixed transitions")

# ----------------------------------------------------------------------
# The loop per minibatch: encode prefixes, joint VAE+encoder step, build
# pessimism-blended targets from the target nets, step the twin critics,
# ascend the bounded perturbation head, soft-update the targets.
# ----------------------------------------------------------------------
t0 = time.time()
agent, log = train(buffer, hyper, progressdelta=max(1, hyper.epochs // 10))
print(f"trained {hyper.epochs} epochs in {(time.time() - t0) / 60:.1f} min")
print(f"generative loss  {log.vae_loss[0]:8.3f} -> {np.mean(log.vae_loss[-50:]):8.3f}")
print(f"critic loss      {log.critic_loss[0]:8.3f} -> {np.mean(log.critic_loss[-50:]):8.3f}")
print(f"perturb objective{log.perturb_q[0]:8.3f} -> {np.mean(log.perturb_q[-50:]):8.3f}")

# ----------------------------------------------------------------------
# Ground-truth check: the learned policy's true Monte-Carlo value versus
# the logging clinician's, under the simulator's real dynamics.
# ----------------------------------------------------------------------
rollouts = 500 if full else 200
va, se_a = monte_carlo_q(params, AgentPolicy(agent, normalizer), None,
                         rollouts, seed=77, gamma=hyper.gamma)
vb, se_b = monte_carlo_q(params, BehaviorPolicyAdapter(params), None,
                         rollouts, seed=77, gamma=hyper.gamma)
print(f"\ntrue value, learned policy : {va:6.2f} ± {se_a:.2f}")
print(f"true value, behavior policy: {vb:6.2f} ± {se_b:.2f}")
print(f"improvement margin: {(va - vb) / np.hypot(se_a, se_b):.1f} standard errors")

agent.save("/tmp/demo_agent.bxp", normalizer=normalizer)
print("\ncheckpoint written to /tmp/demo_agent.bxp (+ .json sidecar)")
