"""One decentralized run, round by round.

The source node never sees the target sample and the target node never sees
the training set; they only trade parameter vectors. Each round the target
reports its score on the aggregated model and the source reports whether it
still classifies its own data correctly.
"""
from _common import small_benchmark

from dison import nn
from dison.data import AugmentPolicy
from dison.isolation import ConvergenceConfig
from dison.protocol import RoundPlan, run_dison

spec, pretrained, train, id_test, ood_test = small_benchmark()
plan = RoundPlan(max_rounds=50, alpha=0.8, class_conditional=True)

res = run_dison(spec, pretrained, train, ood_test.x[0], plan, ConvergenceConfig(), nn.OptimizerState("sgd", 0.01),
                AugmentPolicy(), seed=(0, 0))
print(f"predicted class sent to the source node: {res.predicted_class}; {res.local_steps} local steps per round")
print("round  target p   source acc  stable  src ok  checksum")
for r in res.rounds:
    print(f"{r.round:5d}  {r.target_score:8.3f}  {r.source_accuracy:10.3f}  {r.target_stable!s:6}  "
          f"{r.source_converged!s:6}  {r.checksum:08x}")
print(f"score R = {res.score} ({'censored' if res.censored else 'converged'})")
traffic = sum(n for _, n in res.messages["source_sent"] + res.messages["target_sent"])
print(f"bytes on the wire: {traffic}")
