import numpy as np
import pytest

from dison import nn
from dison.data import NO_AUGMENT, AugmentPolicy, Dataset, class_subset
from dison.isolation import ConvergenceConfig, SourceBatches, Streams, TargetViews, run_centralized
from dison.protocol import (
    AggregationWeights, EmptyClassError, RoundPlan, aggregate, initialize_global, predict_class, run_dison,
    source_local_update, target_local_update,
)

SGD = nn.OptimizerState("sgd", 0.05)


def pv(values):
    values = np.asarray(values, np.float32)
    return nn.ParameterVector(values, (("h.weight", (values.size,)),))


def test_weights():
    w = AggregationWeights(0.8)
    assert w.alpha + w.beta == 1.0
    assert AggregationWeights.from_oversampling(16, 4).alpha == 0.8
    with pytest.raises(ValueError):
        AggregationWeights(1.5)


def test_aggregate_examples():
    assert np.allclose(aggregate(pv([1, 1]), pv([0, 2]), AggregationWeights(0.8)).values, [0.8, 1.2])
    s, t = pv([3, -1, 2]), pv([5, 5, 5])
    assert np.array_equal(aggregate(s, t, AggregationWeights(1.0)).values, s.values)
    assert np.array_equal(aggregate(s, s, AggregationWeights(0.37)).values, s.values)
    with pytest.raises(ValueError):
        aggregate(pv([1, 2]), nn.ParameterVector(np.zeros(2, np.float32), (("h.bias", (2,)),)), AggregationWeights())


def test_aggregate_is_convex(rng):
    for _ in range(50):
        s, t = pv(rng.normal(size=30)), pv(rng.normal(size=30))
        out = aggregate(s, t, AggregationWeights(float(rng.uniform()))).values
        lo, hi = np.minimum(s.values, t.values), np.maximum(s.values, t.values)
        assert np.all((out >= lo - 1e-6) & (out <= hi + 1e-6))


def test_round_plan():
    assert RoundPlan(batch_size=16).resolved(400).local_steps == 25
    assert RoundPlan(batch_size=16).resolved(3).local_steps == 1
    assert RoundPlan(local_steps=4).resolved(400).local_steps == 4
    with pytest.raises(ValueError):
        RoundPlan(local_steps=0)
    with pytest.raises(ValueError):
        RoundPlan(misclass_mode="some_wrong")
    modes = {m: (RoundPlan(misclass_mode=m).force_wrong(False), RoundPlan(misclass_mode=m).force_wrong(True))
             for m in ("none", "all_wrong", "id_wrong", "ood_wrong")}
    assert modes == {"none": (False, False), "all_wrong": (True, True),
                     "id_wrong": (True, False), "ood_wrong": (False, True)}


def test_initialize_global(small_bench):
    spec, pre = small_bench["spec"], small_bench["pretrained"]
    theta = initialize_global(spec, pre, 11)
    for name, seg in theta.segments().items():
        if name.startswith("f."):
            assert np.array_equal(seg, pre[name])
    assert np.array_equal(theta.values, initialize_global(spec, pre, 11).values)
    assert not np.allclose(theta["h.weight"], pre["h.weight"][:, :1])


def test_predict_class():
    spec = nn.NetworkSpec(4, (3,), num_classes=3)
    p = nn.init_params(spec, "multiclass")
    zero = nn.ParameterVector(np.zeros_like(p.values), p.layout)
    assert predict_class(spec, zero, np.ones(4)) == 0
    zero["h.bias"][...] = [0.1, 2.0, -1.0]
    assert predict_class(spec, zero, np.ones(4)) == 1
    rng = np.random.default_rng(0)
    draws = [predict_class(spec, zero, np.ones(4), wrong=True, rng=rng) for _ in range(2000)]
    assert 1 not in draws
    frac = np.mean(np.array(draws) == 0)
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 2000)
    with pytest.raises(ValueError):
        predict_class(spec, zero, np.ones(4), wrong=True)


def _batches(bench, seed=0, policy=NO_AUGMENT, pool=None):
    pool = bench["train"].x if pool is None else pool
    return SourceBatches(pool, 16, policy, np.random.default_rng(seed), 8)


def test_source_update_single_sgd_step(small_bench):
    spec = small_bench["spec"]
    theta = initialize_global(spec, small_bench["pretrained"], 1)
    out = source_local_update(spec, theta, _batches(small_bench), SGD.fresh(), 1)
    xb = _batches(small_bench).draw()
    g = nn.gradient(spec, theta, xb, np.zeros(16), "binary")
    assert np.array_equal(out.values, (theta - 0.05 * g).values)


def test_source_update_steps_compose(small_bench):
    spec = small_bench["spec"]
    theta = initialize_global(spec, small_bench["pretrained"], 1)
    pol = AugmentPolicy()
    three = source_local_update(spec, theta, _batches(small_bench, 4, pol), SGD.fresh(), 3)
    b, opt, step = _batches(small_bench, 4, pol), SGD.fresh(), theta
    for _ in range(3):
        step = source_local_update(spec, step, b, opt, 1)
    assert np.array_equal(three.values, step.values)


def test_class_filtered_batches(small_bench):
    train = small_bench["train"]
    sub = class_subset(train, 1)
    rows = {bytes(r) for r in sub.x}
    b = _batches(small_bench, pool=sub.x)
    for _ in range(10):
        assert all(bytes(r) in rows for r in b.draw())


def test_target_update(small_bench):
    spec = small_bench["spec"]
    theta = initialize_global(spec, small_bench["pretrained"], 2)
    x_t = small_bench["id_test"].x[0]
    out = target_local_update(spec, theta, TargetViews(x_t, NO_AUGMENT, np.random.default_rng(0), 8), SGD.fresh(), 1)
    g = nn.gradient(spec, theta, x_t[None], np.ones(1), "binary")
    assert np.array_equal(out.values, (theta - 0.05 * g).values)
    again = target_local_update(spec, theta, TargetViews(x_t, NO_AUGMENT, np.random.default_rng(9), 8), SGD.fresh(), 1)
    assert np.array_equal(out.values, again.values)


def test_target_loss_decreases_for_small_steps(small_bench):
    spec = small_bench["spec"]
    theta = initialize_global(spec, small_bench["pretrained"], 3).astype(np.float64)
    x_t = small_bench["ood_test"].x[0]
    views = TargetViews(x_t, NO_AUGMENT, np.random.default_rng(0), 8)
    opt = nn.OptimizerState("sgd", 1e-3)
    losses = [nn.mean_loss(spec, theta, x_t[None], [1], "binary")]
    for _ in range(5):
        theta = target_local_update(spec, theta, views, opt, 1)
        losses.append(nn.mean_loss(spec, theta, x_t[None], [1], "binary"))
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 1


def dison(bench, x_t, plan, **kw):
    args = dict(config=ConvergenceConfig(max_rounds=plan.max_rounds), optimizer=nn.OptimizerState("sgd", 0.01),
                policy=AugmentPolicy(), seed=(1, 2))
    args.update(kw)
    return run_dison(bench["spec"], bench["pretrained"], bench["train"], x_t, plan, **args)


def test_rmax_one(small_bench):
    res = dison(small_bench, small_bench["id_test"].x[0], RoundPlan(max_rounds=1))
    assert res.score == 1 and len(res.rounds) == 1


@pytest.mark.parametrize("cc", [False, True])
def test_transcript_message_accounting(small_bench, cc):
    plan = RoundPlan(max_rounds=12, class_conditional=cc)
    res = dison(small_bench, small_bench["ood_test"].x[0], plan)
    n_params = len(nn.layout(small_bench["spec"], "binary"))
    n_values = sum(int(np.prod(s)) for _, s in nn.layout(small_bench["spec"], "binary"))
    assert n_params > 0
    frame = 11 + 4
    sizes = {"InitModel": frame + 4 * n_values, "PredictedClass": frame + 4,
             "LocalParams": frame + 4 + 4 * n_values, "GlobalParams": frame + 5 + 4 * n_values, "Terminate": frame + 4}
    tn, sn = res.messages["target_sent"], res.messages["source_sent"]
    rounds = len(res.rounds)
    assert [m for m, _ in sn] == ["InitModel"] + ["GlobalParams"] * rounds
    assert [m for m, _ in tn] == ["PredictedClass"] * cc + ["LocalParams"] * rounds + ["Terminate"]
    assert all(size == sizes[name] for name, size in sn + tn)
    param_msgs = sum(name in ("LocalParams", "GlobalParams") for name, _ in sn + tn)
    assert param_msgs == 2 * rounds


def test_inproc_and_tcp_agree(small_bench):
    plan = RoundPlan(max_rounds=15, class_conditional=True)
    x_t = small_bench["ood_test"].x[1]
    a = dison(small_bench, x_t, plan)
    b = dison(small_bench, x_t, plan, transport="tcp")
    assert (a.score, a.censored, a.final_checksum) == (b.score, b.censored, b.final_checksum)
    assert [r.checksum for r in a.rounds] == [r.checksum for r in b.rounds]


def test_dison_deterministic_and_seed_sensitive(small_bench):
    plan = RoundPlan(max_rounds=10, local_steps=3)
    x_t = small_bench["id_test"].x[2]
    a, b = dison(small_bench, x_t, plan), dison(small_bench, x_t, plan)
    assert [r.checksum for r in a.rounds] == [r.checksum for r in b.rounds]
    c = dison(small_bench, x_t, plan, seed=(1, 3))
    assert a.rounds[0].checksum != c.rounds[0].checksum


def test_transcript_records_both_flags(small_bench):
    res = dison(small_bench, small_bench["ood_test"].x[0], RoundPlan(max_rounds=40))
    last = res.rounds[-1]
    if not res.censored:
        assert last.source_converged and last.target_stable and last.round == res.score
    assert all(0 <= r.source_accuracy <= 1 for r in res.rounds)


def test_empty_class_surfaces(small_bench):
    train = small_bench["train"]
    only0 = class_subset(train, 0)
    pre = small_bench["pretrained"].copy()
    pre["h.bias"][...] = [-50.0, 50.0]  # always predicts class 1
    with pytest.raises(EmptyClassError):
        run_dison(small_bench["spec"], pre, only0, small_bench["id_test"].x[0], RoundPlan(class_conditional=True),
                  ConvergenceConfig(), SGD, timeout=5)


def test_equivalence_with_centralized(small_bench):
    # one local step, plain SGD, alpha = |B_s| / (|B_s| + N): the trajectories coincide
    spec, pre, train = small_bench["spec"], small_bench["pretrained"], small_bench["train"]
    x_t = small_bench["ood_test"].x[3]
    conf = ConvergenceConfig(max_rounds=20, tau=1.0, e_stab=20)
    pol = AugmentPolicy()
    cen = run_centralized(spec, pre, train.x, x_t, SGD, conf, n_target=4, batch_size=16, policy=pol,
                          seed=5, record_params=True)
    dec = run_dison(spec, pre, train, x_t, RoundPlan(local_steps=1, max_rounds=20, alpha=0.8, batch_size=16),
                    conf, SGD, pol, seed=5, record_params=True)
    assert len(cen.params_history) == len(dec.params_history) == 20
    for a, b in zip(cen.params_history, dec.params_history):
        assert np.max(np.abs(a.values - b.values)) <= 1e-5
