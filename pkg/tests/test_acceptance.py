"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 4 and 7 run on reduced target pools (see REDUCED) to keep the suite
within minutes on one CPU; criterion 3 uses the full default benchmark.
"""
import json
import time

import numpy as np
import pytest

from dison import nn
from dison.cli import main
from dison.experiment import ExperimentConfig, prepare, run_experiment, run_sweep
from dison.isolation import ConvergenceConfig, run_centralized
from dison.metrics import auroc, fpr_at_tpr
from dison.protocol import RoundPlan, run_dison
from dison.transport import GlobalParams, InitModel, LocalParams, decode, encode

from test_gradcheck import REL_TOL, random_triple, referee, relative_error

REDUCED = dict(n_id=10, n_ood=10)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def bench():
    ctx = prepare(ExperimentConfig(), 0)
    return ctx.spec, ctx.pretrained, ctx.train, ctx.id_test, ctx.ood_test


@pytest.fixture(scope="module")
def default_report():
    t0 = time.monotonic()
    report = run_experiment(ExperimentConfig())
    return report, time.monotonic() - t0


def test_1_decentralized_equals_centralized(bench, verdict):
    spec, pretrained, train, id_test, ood_test = bench
    conf = ConvergenceConfig(max_rounds=20, e_stab=20, tau=1.0)  # run all 20 rounds
    plan = RoundPlan(local_steps=1, max_rounds=20, alpha=16 / (16 + 4), batch_size=16)
    pol = ExperimentConfig().policy()
    t0 = time.monotonic()
    worst, rounds = 0.0, []
    for seed in (11, 22, 33):
        x_t = np.vstack([id_test.x, ood_test.x])[seed % 100]
        cen = run_centralized(spec, pretrained, train.x, x_t, nn.OptimizerState("sgd", 0.05), conf, n_target=4, batch_size=16, policy=pol,
                              seed=seed, record_params=True)
        dec = run_dison(spec, pretrained, train, x_t, plan, conf, nn.OptimizerState("sgd", 0.05), pol, seed=seed, record_params=True)
        rounds.append(min(len(cen.params_history), len(dec.params_history)))
        for a, b in zip(cen.params_history, dec.params_history):
            worst = max(worst, float(np.max(np.abs(a.values - b.values))))
    elapsed = time.monotonic() - t0
    ok = rounds == [20, 20, 20] and worst <= 1e-5 and elapsed < 10
    assert verdict(1, ok, f"max-abs gap {worst:.2e} (<= 1e-5) over 3 seeds x 20 rounds, {elapsed:.1f}s (< 10s)")


def test_2_gradient_matches_finite_differences(verdict):
    rng = np.random.default_rng(2)
    t0 = time.monotonic()
    worst, triples, heads, norms = 0.0, 0, set(), set()
    while triples < 120:
        spec, params, x, y, head = random_triple(rng)
        g = nn.gradient(spec, params, x, y, head).values
        err, ok = relative_error(g, referee(spec, params, x, y, head))
        worst = max(worst, float(err.max()))
        triples += 1
        heads.add(head)
        norms.add(spec.use_instance_norm)
    elapsed = time.monotonic() - t0
    ok = worst < REL_TOL and elapsed < 30 and heads == {"binary", "multiclass"} and norms == {True, False}
    assert verdict(2, ok, f"worst relative error {worst:.2e} (< 1e-4) over {triples} triples, {elapsed:.1f}s (< 30s)")


@pytest.mark.slow
def test_3_cc_dison_beats_msp(default_report, verdict):
    report, elapsed = default_report
    s = report["summary"]
    ok = s["auroc"]["mean"] >= 0.90 and s["auroc"]["mean"] > s["msp_auroc"]["mean"] and elapsed < 600
    per_seed = ", ".join(f"{p['metrics']['auroc']:.3f}" for p in report["per_seed"])
    assert verdict(3, ok, f"CC-DIsoN AUROC {s['auroc']['mean']:.3f} +- {s['auroc']['std']:.3f} [{per_seed}] "
                          f"vs MSP {s['msp_auroc']['mean']:.3f}; FPR95 {s['fpr95']['mean']:.3f}; {elapsed:.0f}s (< 600s)")


def spearman(x, y):
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for value in np.unique(v):  # average ranks over ties
            r[v == value] = r[v == value].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    if rx.std() == 0 or ry.std() == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


@pytest.mark.slow
def test_4_alpha_trend_and_ood_converges_sooner(default_report, verdict):
    res = run_sweep(ExperimentConfig(**REDUCED), "alpha")
    rows = res["rows"]
    seeds = sorted({r["seed"] for r in rows})
    rhos = [spearman([r["point"] for r in rows if r["seed"] == s], [r["mean_rounds"] for r in rows if r["seed"] == s])
            for s in seeds]
    means = {p["point"]: round(p["report"]["summary"]["mean_rounds"]["mean"], 2) for p in res["points"]}
    records = default_report[0]["records"]
    med_id = float(np.median([r["score"] for r in records if not r["ood"]]))
    med_ood = float(np.median([r["score"] for r in records if r["ood"]]))
    ok = np.mean(rhos) > 0 and med_ood <= med_id
    assert verdict(4, ok, f"mean rounds by alpha {means}, Spearman per seed {np.round(rhos, 3).tolist()} "
                          f"(mean {np.mean(rhos):.3f} > 0); median rounds at alpha 0.8 OOD {med_ood} <= ID {med_id}")


def test_5_metric_fast_paths_match_oracles(verdict):
    rng = np.random.default_rng(5)
    t0 = time.monotonic()
    mismatches = 0
    for _ in range(1000):
        n_id, n_ood = rng.integers(1, 51, size=2)
        hi = int(rng.choice([3, 10, 1000]))
        a, b = rng.integers(0, hi, n_id).astype(float), rng.integers(0, hi, n_ood).astype(float)
        pairs = (a[:, None] > b[None, :]).sum() + 0.5 * (a[:, None] == b[None, :]).sum()
        brute_auc = pairs / (n_id * n_ood)
        threshold = max(t for t in np.unique(np.concatenate([a, b])) if np.mean(a >= t) >= 0.95)
        brute_fpr = float(np.mean(b >= threshold))
        mismatches += (auroc(a, b) != brute_auc) + (fpr_at_tpr(a, b) != brute_fpr)
    elapsed = time.monotonic() - t0
    ok = mismatches == 0 and elapsed < 5
    assert verdict(5, ok, f"{mismatches} mismatches over 1000 random sets (AUROC and FPR95), {elapsed:.2f}s (< 5s)")


def test_6_transport_fidelity(bench, verdict):
    rng = np.random.default_rng(6)
    lengths = [1, 2, 100_000] + list(rng.integers(1, 100_001, size=30))
    bad = 0
    for i, n in enumerate(lengths):
        raw = rng.integers(0, 2**32, size=n, dtype=np.uint32)
        raw[(raw & 0x7F800000) == 0x7F800000] = 0
        p = raw.view(np.float32)
        for msg in (InitModel(p), LocalParams(i + 1, p), GlobalParams(i + 1, p, bool(i % 2))):
            frame = encode(msg)
            back = decode(frame)
            bad += back.params.tobytes() != p.tobytes() or encode(back) != frame
    spec, pretrained, train, _, ood_test = bench
    cfg = ExperimentConfig()
    x_t = ood_test.x[0]
    a, b = (run_dison(spec, pretrained, train, x_t, cfg.plan(), cfg.convergence(), cfg.optimizer_state(),
                      cfg.policy(), seed=(0, 50), transport=t) for t in ("inproc", "tcp"))
    same = (a.score, a.final_checksum) == (b.score, b.final_checksum)
    ok = bad == 0 and same
    assert verdict(6, ok, f"{3 * len(lengths) - bad}/{3 * len(lengths)} frames bitwise exact (lengths up to 100000); "
                          f"inproc R={a.score} crc={a.final_checksum:08x} vs tcp R={b.score} crc={b.final_checksum:08x}")


@pytest.mark.slow
def test_7_augmenting_both_nodes_helps(verdict):
    res = run_sweep(ExperimentConfig(**REDUCED), "augment")
    auc = {p["point"]: p["report"]["summary"]["auroc"]["mean"] for p in res["points"]}
    ok = auc["both"] >= auc["none"] - 0.02
    table = ", ".join(f"{k} {v:.3f}" for k, v in auc.items())
    assert verdict(7, ok, f"mean AUROC both {auc['both']:.3f} >= none {auc['none']:.3f} - 0.02; four-way: {table}")


@pytest.mark.slow
def test_8_misclassification_modes_run(tmp_path, verdict):
    aurocs, labels = {}, {}
    for mode in ("none", "all_wrong", "id_wrong", "ood_wrong"):
        out = tmp_path / mode
        code = main(["run", "--misclass", mode, "--n-id", "10", "--n-ood", "10", "--seeds", "0,1,2",
                     "--out", str(out)])
        report = json.loads((out / "report.json").read_text())
        expect = {"none": lambda ood: False, "all_wrong": lambda ood: True,
                  "id_wrong": lambda ood: not ood, "ood_wrong": lambda ood: ood}[mode]
        flags_ok = all(bool(r["forced_wrong"]) == expect(bool(r["ood"])) for r in report["records"])
        labels[mode] = (code, report["misclass"], report["config"]["misclass"], flags_ok)
        aurocs[mode] = report["summary"]["auroc"]["mean"]
    ok = all(v == (0, m, m, True) for m, v in labels.items())
    table = ", ".join(f"{m} {a:.3f}" for m, a in aurocs.items())
    assert verdict(8, ok, f"all four runs exit 0 with matching mode labels and forced-wrong flags; AUROC {table}")
