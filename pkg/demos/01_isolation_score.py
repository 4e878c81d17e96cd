"""How hard is it to isolate one sample from the training set?

A binary head on top of the pretrained features is trained to label the
source set 0 and a single target 1 (the target is repeated N times in every
mini-batch). The number of steps until the target is held above 0.5 for five
steps in a row, with the source set still mostly below 0.5, is the score.

On this small benchmark the per-step count separates ID from artifact
targets only moderately; the round-based protocol in 04_benchmark.py, with
a full pass over the source data per round, separates them far better.
"""
import numpy as np
from _common import small_benchmark

from dison import nn
from dison.isolation import ConvergenceConfig, run_centralized
from dison.metrics import auroc

spec, pretrained, train, id_test, ood_test = small_benchmark()
config = ConvergenceConfig(max_rounds=300)

scores = {}
for name, split in (("ID", id_test), ("OOD", ood_test)):
    scores[name] = [run_centralized(spec, pretrained, train.x, split.x[i], nn.OptimizerState("sgd", 0.003), config,
                                    n_target=1, seed=(0, i)).score for i in range(10)]
    print(f"{name:>3} steps to isolate: {scores[name]}  (median {np.median(scores[name]):.0f})")
print(f"AUROC of the step count: {auroc(scores['ID'], scores['OOD']):.2f}")
