"""Scoring a pool of targets and comparing with the softmax-confidence baseline.

A reduced version of the full benchmark (run `dison run` for the 50/50 pool
over three seeds). Higher round counts mean "more in-distribution", so the
AUROC is computed with ID as the positive class.
"""
from dison.experiment import ExperimentConfig, run_experiment

report = run_experiment(ExperimentConfig(mode="cc_dison", n_id=10, n_ood=10, seeds=[0]))
m = report["per_seed"][0]["metrics"]
print(f"CC-DIsoN AUROC {m['auroc']:.3f}  FPR95 {m['fpr95']:.3f}")
print(f"MSP      AUROC {m['msp_auroc']:.3f}  FPR95 {m['msp_fpr95']:.3f}")
print(f"rounds, 25/50/75th percentile: ID {m['quantiles_id']}  OOD {m['quantiles_ood']}")
