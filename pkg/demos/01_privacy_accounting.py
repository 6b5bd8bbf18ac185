"""
Privacy accounting walk-through
===============================

What the accountant does: track Renyi divergence per order across steps of
the subsampled Gaussian mechanism, then convert the whole curve to a single
(epsilon, delta) statement. Run it; every number below is recomputed live.
"""
import numpy as np

import dpsparse as dps

# one full-batch Gaussian release (q=1, one step) at sigma=2
state = dps.fresh_state(sigma=2.0, q=1.0)
state = dps.compose(state, 1)
print("one release at sigma=2:")
print("  eps at delta=1e-5 :", dps.to_eps_delta(state, 1e-5))
print("  eps at delta=1e-8 :", dps.to_eps_delta(state, 1e-8))
print()

# subsampling amplification: the same sigma hurts far less when each step
# only touches a q-fraction of the data
for q in (1.0, 0.1, 0.01):
    s = dps.compose(dps.fresh_state(sigma=2.0, q=q), 1)
    print(f"  q={q:<5} one step ->  eps {dps.to_eps_delta(s, 1e-5):.6f}")
print()

# composition is linear in the Renyi curve, so T steps cost T times the
# per-step curve before conversion (not T times the converted epsilon)
s1 = dps.compose(dps.fresh_state(2.0, 0.01), 100)
s2 = dps.compose(dps.fresh_state(2.0, 0.01), 1000)
print("100 steps at q=0.01 :", dps.to_eps_delta(s1, 1e-5))
print("1000 steps          :", dps.to_eps_delta(s2, 1e-5))
print()

# the inverse question: how much noise buys a target budget?
budget = dps.PrivacyBudget(epsilon=3.0, delta=1e-5)
for steps in (100, 700, 5000):
    sigma = dps.calibrate_sigma(budget, q=256 / 60000, n_steps=steps)
    achieved = dps.to_eps_delta(
        dps.compose(dps.fresh_state(sigma, 256 / 60000), steps), 1e-5)
    print(f"  {steps:>5} steps of B=256 on N=60000 -> sigma {sigma:.4f} "
          f"(spends eps {achieved:.4f} of 3.0)")
print()

# splitting one budget between a pruning query and the training loop
split = dps.split_budget(budget, "dp_snip")
print("budget split for a dp_snip run:", split)
print("the pruning share pays for one q=1 sensitivity query; the rest is")
print("calibrated into the per-step training noise.")
