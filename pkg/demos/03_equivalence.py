"""Decentralized training can reproduce centralized training exactly.

With one local step, plain SGD and alpha = |B_s| / (|B_s| + N), averaging the
two nodes' updated parameters gives the same step as one centralized step on
a batch holding |B_s| source samples and N copies of the target. Here both
are run side by side from the same random streams and compared per round.
"""
import numpy as np
from _common import small_benchmark

from dison import nn
from dison.data import AugmentPolicy
from dison.isolation import ConvergenceConfig, run_centralized
from dison.protocol import RoundPlan, run_dison

spec, pretrained, train, id_test, _ = small_benchmark()
sgd = nn.OptimizerState("sgd", 0.05)
conf = ConvergenceConfig(max_rounds=20, e_stab=20, tau=1.0)  # never stop early
pol = AugmentPolicy()

cen = run_centralized(spec, pretrained, train.x, id_test.x[0], sgd, conf, n_target=4, batch_size=16, policy=pol,
                      seed=1, record_params=True)
dec = run_dison(spec, pretrained, train, id_test.x[0], RoundPlan(local_steps=1, max_rounds=20, alpha=16 / 20),
                conf, sgd, pol, seed=1, record_params=True)
for r, (a, b) in enumerate(zip(cen.params_history, dec.params_history), 1):
    print(f"round {r:2d}: max |centralized - decentralized| = {np.max(np.abs(a.values - b.values)):.2e}")
