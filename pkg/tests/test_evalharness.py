import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgsense import evalharness as eh, vae
from dgsense.core import ArgumentError, BatchLog, SplitSpec, StateError, TrainConfig, seeded_rng

from conftest import toy_set


def spec_for(cfg, variant="dgsense", targets=(), repeats=(0,)):
    return eh.ExperimentSpec(split=SplitSpec(target_domains=tuple(targets)), config=cfg, variant=variant,
                             repeats=repeats)


def test_metrics_hand_example():
    r = eh.compute_metrics([1, 1, 1, 1, 0, 0], [1, 1, 0, 1, 1, 0], positive_class=1)
    assert r.precision == 0.75 and r.recall == 0.75 and r.accuracy == 4 / 6
    assert r.confusion == [[1, 1], [1, 3]] and r.averaging == "positive:1"


def test_metrics_perfect_and_degenerate():
    r = eh.compute_metrics([0, 1, 2, 2], [0, 1, 2, 2])
    assert r.accuracy == r.precision == r.recall == 1.0 and r.averaging == "macro"
    d = eh.compute_metrics([1, 1, 0], [0, 0, 0], positive_class=1)
    assert d.recall == 0.0 and d.precision == 0.0 and "precision_undefined:1" in d.flags


def test_metrics_errors():
    with pytest.raises(ArgumentError):
        eh.compute_metrics([0, 1], [0])
    with pytest.raises(ArgumentError):
        eh.compute_metrics([], [])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5).flatmap(lambda k: st.tuples(st.just(k), st.lists(st.tuples(st.integers(0, k - 1),
                                                                                      st.integers(0, k - 1)),
                                                                            min_size=1, max_size=40))))
def test_metrics_confusion_invariants(case):
    k, pairs = case
    y, p = np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
    r = eh.compute_metrics(y, p, num_classes=k)
    conf = np.array(r.confusion)
    assert conf.sum(1).tolist() == np.bincount(y, minlength=k).tolist()
    assert r.accuracy == np.trace(conf) / conf.sum() == np.mean(y == p)
    for c in range(k):
        tp, pred, act = conf[c, c], conf[:, c].sum(), conf[c].sum()
        pc = eh.compute_metrics(y, p, positive_class=c, num_classes=k)
        assert pc.precision == (tp / pred if pred else 0.0)
        assert pc.recall == (tp / act if act else 0.0)


def test_stratified_folds_balanced():
    labels = np.repeat(np.arange(6), 100)
    folds = eh.stratified_folds(labels, 5, np.random.default_rng(0))
    assert [len(f) for f in folds] == [120] * 5
    joined = np.concatenate(folds)
    assert sorted(joined.tolist()) == list(range(600))
    for f in folds:
        counts = np.bincount(labels[f], minlength=6)
        assert counts.max() - counts.min() <= 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(5, 23), min_size=1, max_size=6), st.integers(2, 5), st.integers(0, 999))
def test_stratified_folds_properties(counts, k, seed):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    folds = eh.stratified_folds(labels, k, np.random.default_rng(seed))
    joined = np.concatenate(folds)
    assert len(joined) == len(labels) and len(set(joined.tolist())) == len(labels)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for c, n in enumerate(counts):
        per = [int(np.sum(labels[f] == c)) for f in folds]
        assert max(per) - min(per) <= 1


def test_stratified_folds_errors():
    with pytest.raises(ArgumentError):
        eh.stratified_folds([0, 0, 1], 2, np.random.default_rng(0))
    with pytest.raises(ArgumentError):
        eh.stratified_folds([0, 1], 1, np.random.default_rng(0))


def test_spec_validation(tiny_cfg):
    with pytest.raises(ArgumentError):
        spec_for(tiny_cfg, repeats=())
    with pytest.raises(ArgumentError):
        spec_for(tiny_cfg, variant="bogus")


def test_leave_one_domain_out_counts_and_audit(tiny_cfg):
    data = toy_set(num_domains=3)
    result = eh.leave_one_domain_out(data, spec_for(tiny_cfg))
    assert len(result["folds"]) == 3 and result["aggregate"]["folds"] == 3
    assert [f["target"] for f in result["folds"]] == ["D0", "D1", "D2"]
    assert all(f["leaked"] == 0 for f in result["folds"])
    assert all(f["num_virtual"] > 0 for f in result["folds"])
    mean = np.mean([f["metrics"].accuracy for f in result["folds"]])
    assert result["aggregate"]["accuracy"] == pytest.approx(mean, abs=1e-12)
    assert all(f["batches"]["generator"]["batches"] > 0 and f["batches"]["domain"]["batches"] > 0 for f in result["folds"])
    assert set(result["folds"][0]["metrics"].per_domain) == {"D0"}


def test_leakage_oracle_detects_target_in_batches(tiny_cfg):
    data = toy_set(num_domains=2)
    log = BatchLog()
    eh.train_pipeline(data, tiny_cfg, "dgsense", log)
    assert len(eh.audit_leakage(log, data.domain("D1").samples)) == len(data.domain("D1").samples)


def test_loo_is_reproducible(tiny_cfg):
    data = toy_set(num_domains=2)
    a = eh.build_report(spec_for(tiny_cfg), eh.leave_one_domain_out(data, spec_for(tiny_cfg)))[0]
    b = eh.build_report(spec_for(tiny_cfg), eh.leave_one_domain_out(data, spec_for(tiny_cfg)))[0]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_loo_errors(tiny_cfg):
    with pytest.raises(ArgumentError):
        eh.leave_one_domain_out(toy_set(num_domains=1), spec_for(tiny_cfg))
    with pytest.raises(ArgumentError):
        eh.leave_one_domain_out(toy_set(), spec_for(tiny_cfg, targets=("P9",)))


def test_k_fold_pooled_accuracy(tiny_cfg):
    data = toy_set(num_domains=2, per_class=5)
    result = eh.k_fold_in_domain(data, 5, spec_for(tiny_cfg, variant="no_dg"))
    folds = result["folds"]
    assert len(folds) == 5
    assert sum(np.sum(f["metrics"].confusion) for f in folds) == data.n
    pooled = np.sum([np.asarray(f["metrics"].confusion) for f in folds], axis=0)
    assert abs(result["aggregate"]["pooled_accuracy"] - np.trace(pooled) / pooled.sum()) < 1e-9
    # equal-size folds make the mean of fold accuracies the pooled accuracy
    assert abs(result["aggregate"]["accuracy"] - result["aggregate"]["pooled_accuracy"]) < 1e-9


def test_zero_virtual_equals_no_virtual(tiny_cfg):
    data = toy_set(num_domains=3)
    spec = spec_for(tiny_cfg, targets=("D2",))
    row = eh.run_ablation(data, "num_virtual", [0], spec)[0]
    base, model = eh.run_fold(data, ("D2",), spec_for(tiny_cfg, "no_virtual"), 0)
    assert row["accuracies"] == [base.accuracy]
    _, zero = eh.run_fold(data, ("D2",), spec, 0, virtual_ratio=0)
    from dgsense.episodic import parameter_digest
    assert parameter_digest(zero.main) == parameter_digest(model.main)


def test_ablation_rows_and_repeatability(tiny_cfg):
    data = toy_set(num_domains=3)
    spec = spec_for(tiny_cfg, repeats=(0, 1))
    rows = eh.run_ablation(data, "num_domains", [1, 2], spec)
    assert [r["value"] for r in rows] == [1, 2] and all(len(r["accuracies"]) == 2 for r in rows)
    again = eh.run_ablation(data, "num_domains", [1, 2], spec)
    assert [r["accuracies"] for r in rows] == [r["accuracies"] for r in again]
    assert eh.ablation_csv(rows).splitlines()[0] == "sweep,value,target,mean_accuracy"


@pytest.mark.parametrize("sweep,grid", [("num_domains", [3]), ("num_domains", [0]), ("num_real", [5]),
                                        ("num_virtual", [-1]), ("generator_variant", ["single"]),
                                        ("bogus", [1]), ("num_domains", [])])
def test_ablation_grid_errors(tiny_cfg, sweep, grid):
    with pytest.raises(ArgumentError):
        eh.run_ablation(toy_set(num_domains=3), sweep, grid, spec_for(tiny_cfg))


def test_quality_check_identity_and_noise():
    data = toy_set(num_domains=1, per_class=12, num_classes=2)
    cfg = TrainConfig(epochs_vae=150, epochs_main=15, batch_size=8, latent_dim=4, feature_dim=8,
                      omega_signal=1.0, omega_noise=0.0, learning_rate_vae=3e-3)
    gen = vae.build_generator("cross", data.modalities, cfg, seeded_rng(0, "g"))
    vae.fit_generator(gen, data.samples(), cfg, seeded_rng(0, "f"))
    r2v, v2r = eh.quality_check_virtual(gen, data.samples(), cfg)
    assert r2v >= 0.95 and v2r >= 0.95
    noisy, _ = eh.quality_check_virtual(gen, data.samples(), cfg.replace(omega_signal=0.8, omega_noise=10.0))
    assert noisy < r2v


def test_quality_check_requires_trained_generator(tiny_cfg, toy):
    gen = vae.build_generator("cross", toy.modalities, tiny_cfg, seeded_rng(0, "g"))
    with pytest.raises(StateError):
        eh.quality_check_virtual(gen, toy.samples(), tiny_cfg)


def test_report_schema(tiny_cfg):
    data = toy_set(num_domains=2)
    spec = spec_for(tiny_cfg, variant="no_dg")
    report, timing = eh.build_report(spec, eh.leave_one_domain_out(data, spec))
    assert report["version"] == 1 and set(report) == {"version", "spec", "folds", "aggregate"}
    assert "runtime_s" not in report["folds"][0]["metrics"] and len(timing["folds"]) == 2
    assert eh.folds_csv(report).count("\n") == 3
