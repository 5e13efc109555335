import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from conservattack import attack, data, nn, stats
from conservattack.exceptions import ConfigError, DataError

STEP = attack.AttackConfig(min_change=0.1, step=0.2)


def replay_matrices(X, changes, n_iterations):
    """Adversarial matrix at the end of each iteration, rebuilt from the change log."""
    X = np.array(X, dtype=float)
    out = [X.copy()]
    for it in range(1, n_iterations + 1):
        for c in changes[changes["iteration"] == it]:
            assert X[c["row"], c["feature"]] == c["old"]
            X[c["row"], c["feature"]] = c["new"]
        out.append(X.copy())
    return out


def full_drift(Xc, Xa, bounds, num_bins):
    hc = stats.FeatureHistogram.from_matrix(Xc, num_bins, bounds)
    ha = stats.FeatureHistogram.from_matrix(Xa, num_bins, bounds)
    jsd = np.array([stats.jsd(p, q) for p, q in zip(hc.normalized, ha.normalized)])
    fn = stats.delta_fn(np.corrcoef(Xc, rowvar=False), np.corrcoef(Xa, rowvar=False))
    return jsd, fn


# -- configuration ---------------------------------------------------------------


def test_table_one_presets():
    h = attack.preset("higgs")
    assert (h.min_change, h.step, h.n_iterations, h.alpha, h.beta) == (0.0005, 0.0005, 10, 4.0, 1.0)
    assert (h.max_jsd_single_change, h.max_frob_single_change, h.use_no_change) == (0.006, 0.0002, True)
    t = attack.preset("ttww")
    assert (t.min_change, t.step, t.alpha, t.max_jsd_single_change, t.max_frob_single_change) == (
        0.005, 0.01, 6.5, 0.003, 0.003)


def test_every_preset_is_valid_and_round_trips():
    for name in attack.PRESETS:
        cfg = attack.preset(name)
        assert attack.AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_config_violations():
    with pytest.raises(ConfigError, match="alpha must be ≥ 0"):
        attack.AttackConfig(min_change=0.1, step=0.1, alpha=-1)
    with pytest.raises(ConfigError, match="alpha \\+ beta"):
        attack.AttackConfig(min_change=0.1, step=0.1, alpha=0, beta=0)
    with pytest.raises(ConfigError, match="step or num_candidates"):
        attack.AttackConfig(min_change=0.1)
    with pytest.raises(ConfigError, match="unknown"):
        attack.AttackConfig.from_dict({"min_change": 0.1, "step": 0.1, "alpah": 1})
    assert attack.AttackConfig.check({"step": 0.1}) == ["missing required key 'min_change'"]
    assert attack.AttackConfig.check(attack.preset("higgs").to_dict()) == []
    with pytest.raises(ConfigError, match="unknown preset"):
        attack.preset("nope")


def test_unbounded_thresholds_serialize_as_null():
    cfg = attack.AttackConfig(min_change=0.1, step=0.1)
    assert cfg.to_dict()["max_jsd_single_change"] is None
    assert math.isinf(attack.AttackConfig.from_dict(cfg.to_dict()).max_jsd_single_change)


def test_sampled_retraining_configs_stay_in_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cfg = attack.sample_config(rng)
        for key, (lo, hi) in attack.RETRAIN_RANGES.items():
            assert lo <= getattr(cfg, key) <= hi


# -- candidates ------------------------------------------------------------------


def test_step_candidates_example():
    c = attack.generate_candidates(0.5, 1, (0.0, 1.0), STEP, include_no_change=False)
    assert np.allclose(c, [0.6, 0.8, 1.0], atol=1e-12)


def test_candidates_at_bound():
    assert list(attack.generate_candidates(1.0, 1, (0.0, 1.0), STEP)) == [1.0]
    assert attack.generate_candidates(1.0, 1, (0.0, 1.0), STEP, include_no_change=False).size == 0


def test_num_candidates_are_evenly_spaced():
    cfg = attack.AttackConfig(min_change=0.2, num_candidates=4, use_no_change=False)
    c = attack.generate_candidates(0.0, 1, (0.0, 1.0), cfg)
    assert np.allclose(c, np.linspace(0.2, 1.0, 4), atol=1e-15) and c[-1] == 1.0


def test_negative_direction_and_no_change_last():
    c = attack.generate_candidates(0.5, -1, (0.0, 1.0), STEP)
    assert np.allclose(c[:-1], [0.4, 0.2, 0.0], atol=1e-12) and c[-1] == 0.5


def test_step_candidates_are_capped():
    cfg = attack.AttackConfig(min_change=1e-5, step=1e-5)
    c = attack.generate_candidates(0.0, 1, (0.0, 1.0), cfg, include_no_change=False)
    assert c.size == attack.MAX_STEP_CANDIDATES


@settings(max_examples=80, deadline=None)
@given(st.floats(0, 1), st.sampled_from([-1, 1]), st.floats(1e-4, 0.3), st.floats(1e-3, 0.3),
       st.one_of(st.none(), st.integers(1, 40)))
def test_candidates_stay_in_bounds_and_move_with_gradient(x, sign, p_min, step, num):
    cfg = attack.AttackConfig(min_change=p_min, step=step, num_candidates=num)
    c = attack.generate_candidates(x, sign, (0.0, 1.0), cfg, include_no_change=False)
    assert np.all((c >= 0.0) & (c <= 1.0))
    assert np.all(sign * (c - x) >= p_min - 1e-9)
    assert np.all(np.diff(sign * c) >= -1e-15)


# -- scoring ---------------------------------------------------------------------


def _state(X, cfg):
    return attack.DriftState(X, np.column_stack([X.min(0), X.max(0)]), cfg)


def test_no_op_candidate_reports_current_deviation():
    r = np.random.default_rng(0)
    X = r.normal(size=(200, 3))
    cfg = attack.AttackConfig(min_change=0.05, step=0.05, num_bins=20)
    s = _state(X, cfg)
    s.apply(4, 1, 2.0)
    jsd, fn, cost = attack.score_candidate(s, 9, 2, s.X[9, 2], cfg)
    assert jsd == s.feature_jsd[2] and fn == pytest.approx(s.delta_fn, abs=1e-14)
    assert cost == pytest.approx(cfg.alpha * jsd + cfg.beta * fn)


def test_single_feature_has_no_correlation_drift():
    X = np.random.default_rng(0).normal(size=(100, 1))
    cfg = attack.AttackConfig(min_change=0.1, step=0.1)
    s = _state(X, cfg)
    _, fn, _ = attack.score_candidate(s, 0, 0, 3.0, cfg)
    assert fn == 0.0


def test_scoring_is_pure():
    X = np.random.default_rng(1).normal(size=(150, 4))
    cfg = attack.AttackConfig(min_change=0.1, step=0.1, num_bins=15)
    s = _state(X, cfg)
    before = (s.X.copy(), s.adv.histograms.counts.copy(), s.adv.correlation.cov.copy(), s.diff.copy(), s.fn_sq)
    for row in range(20):
        s.score_many(row, np.arange(4).repeat(5), np.linspace(-2, 2, 20))
    assert np.array_equal(before[0], s.X) and np.array_equal(before[1], s.adv.histograms.counts)
    assert np.array_equal(before[2], s.adv.correlation.cov) and np.array_equal(before[3], s.diff)
    assert before[4] == s.fn_sq
    fresh = _state(X, cfg)
    assert np.array_equal(fresh.adv.correlation.corr, s.adv.correlation.corr)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_scores_match_full_recompute(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(80, 3))
    bounds = np.column_stack([X.min(0), X.max(0)])
    cfg = attack.AttackConfig(min_change=0.1, step=0.1, num_bins=12)
    s = attack.DriftState(X, bounds, cfg)
    for _ in range(15):
        s.apply(int(r.integers(80)), int(r.integers(3)), float(r.uniform(*bounds[0])))
    row, j = int(r.integers(80)), int(r.integers(3))
    cands = r.uniform(bounds[j, 0], bounds[j, 1], 6)
    jsd, fn = s.score(row, j, cands)
    for c, js, f in zip(cands, jsd, fn):
        Y = s.X.copy()
        Y[row, j] = c
        full_jsd, full_fn = full_drift(X, Y, bounds, 12)
        assert js == pytest.approx(full_jsd[j], abs=1e-10)
        assert f == pytest.approx(full_fn, abs=1e-10)


def test_dcor_scores_match_full_recompute():
    r = np.random.default_rng(3)
    X = r.normal(size=(60, 3))
    X[:, 1] = X[:, 0] ** 2
    cfg = attack.AttackConfig(min_change=0.1, step=0.1, num_bins=10, use_disco=True, disco_subsample_cap=100)
    s = _state(X, cfg)
    jsd, fn = s.score(5, 0, [1.5])
    Y = X.copy()
    Y[5, 0] = 1.5
    full = stats.delta_fn(stats.dcor_matrix(X, 100, 0), stats.dcor_matrix(Y, 100, 0))
    assert fn[0] == pytest.approx(full, abs=1e-10)


# -- the attack loop -------------------------------------------------------------


def test_zero_iterations_returns_input(small_donut, donut_model):
    res = attack.attack(donut_model, small_donut, attack.preset("donut_test", n_iterations=0))
    assert np.array_equal(res.adversarial_features, small_donut.features)
    assert res.fooling_ratio == 0.0 and res.final_delta_fn == 0.0


def test_rejects_mismatched_width(small_donut):
    with pytest.raises(DataError):
        attack.run_attack(nn.build("higgs"), small_donut.features, attack.preset("donut_test"))


def test_contract_one_change_per_row_per_iteration(donut_attack):
    _, res = donut_attack
    keys = res.changes[["iteration", "row"]]
    assert np.unique(keys).size == keys.size


def test_contract_changes_respect_thresholds(donut_attack):
    cfg, res = donut_attack
    assert res.changes.size > 0
    assert np.all(res.changes["jsd_increase"] <= cfg.max_jsd_single_change)
    assert np.all(res.changes["fn_increase"] <= cfg.max_frob_single_change)


def test_contract_threshold_increments_match_full_recompute(small_donut, donut_attack):
    cfg, res = donut_attack
    X = small_donut.features.copy()
    bounds = small_donut.feature_bounds
    jsd, fn = full_drift(small_donut.features, X, bounds, cfg.num_bins)
    for c in res.changes[:300]:
        X[c["row"], c["feature"]] = c["new"]
        jsd2, fn2 = full_drift(small_donut.features, X, bounds, cfg.num_bins)
        assert jsd2[c["feature"]] - jsd[c["feature"]] == pytest.approx(c["jsd_increase"], abs=1e-9)
        assert fn2 - fn == pytest.approx(c["fn_increase"], abs=1e-9)
        jsd, fn = jsd2, fn2


def test_contract_fooled_rows_are_frozen(small_donut, donut_model, donut_attack):
    cfg, res = donut_attack
    mats = replay_matrices(small_donut.features, res.changes, cfg.n_iterations)
    assert np.array_equal(mats[-1], res.adversarial_features)
    clean = nn.predict(donut_model, small_donut.features)[1]
    fooled_at = np.full(small_donut.n, np.inf)
    for it in range(1, cfg.n_iterations + 1):
        now = nn.predict(donut_model, mats[it])[1] != clean
        fooled_at[now & np.isinf(fooled_at)] = it
        frozen = fooled_at < it
        assert np.array_equal(mats[it][frozen], mats[it - 1][frozen])


def test_contract_audit_and_bounds(small_donut, donut_attack):
    _, res = donut_attack
    assert res.audit["passed"]
    b = small_donut.feature_bounds
    assert np.all((res.adversarial_features >= b[:, 0]) & (res.adversarial_features <= b[:, 1]))


def test_fooled_mask_matches_model(small_donut, donut_model, donut_attack):
    _, res = donut_attack
    clean = nn.predict(donut_model, small_donut.features)[1]
    adv = nn.predict(donut_model, res.adversarial_features)[1]
    assert np.array_equal(res.fooled_mask, clean != adv)
    fr = [t["fooling_ratio"] for t in res.per_iteration_trace]
    assert np.all(np.diff(fr) >= 0) and fr[-1] == res.fooling_ratio > 0


def test_evaluate_matches_incremental(small_donut, donut_model, donut_attack):
    cfg, res = donut_attack
    rep = attack.evaluate_attack(small_donut, res, donut_model, num_bins=cfg.num_bins)
    assert rep["fooling_ratio"] == res.fooling_ratio
    assert rep["mean_jsd"] == pytest.approx(res.final_mean_jsd, abs=1e-9)
    assert rep["delta_fn"] == pytest.approx(res.final_delta_fn, abs=1e-9)
    assert rep["delta_fn"] == stats.delta_fn(np.array(rep["clean_correlation"]),
                                             np.array(rep["adversarial_correlation"]))


def test_evaluate_zero_perturbation(small_donut, donut_model):
    res = attack.attack(donut_model, small_donut, attack.preset("donut_test", n_iterations=0))
    rep = attack.evaluate_attack(small_donut, res, donut_model)
    assert rep["fooling_ratio"] == 0 and rep["mean_jsd"] == 0 and rep["delta_fn"] == 0


def _slice(ds, n=300):
    # strided so both classes appear (the generator stacks signal first)
    return ds.subset(np.linspace(0, ds.n - 1, n).astype(int))


def test_determinism_and_parallel_agreement(small_donut, donut_model):
    ds = _slice(small_donut)
    cfg = attack.preset("donut_test", n_iterations=3)
    a = attack.attack(donut_model, ds, cfg)
    b = attack.attack(donut_model, ds, cfg)
    assert np.array_equal(a.adversarial_features, b.adversarial_features)
    assert a.per_iteration_trace == b.per_iteration_trace
    c = attack.attack(donut_model, ds, attack.preset("donut_test", n_iterations=3, n_gpus=3))
    assert np.array_equal(a.fooled_mask, c.fooled_mask)
    assert np.array_equal(a.changes[["row", "feature", "new"]], c.changes[["row", "feature", "new"]])


def test_without_nc_every_active_row_moves(small_donut, donut_model):
    ds = _slice(small_donut, 200)
    res = attack.attack(donut_model, ds, attack.preset("donut_test", n_iterations=1, use_no_change=False))
    assert res.per_iteration_trace[1]["rejected"] == 0
    assert res.changes.size == ds.n


def test_zero_thresholds_never_increase_drift(small_donut, donut_model):
    ds = _slice(small_donut, 200)
    cfg = attack.preset("donut_test", n_iterations=2, max_jsd_single_change=0.0, max_frob_single_change=0.0)
    res = attack.attack(donut_model, ds, cfg)
    assert np.all(res.changes["jsd_increase"] <= 0) and np.all(res.changes["fn_increase"] <= 0)
    assert res.per_iteration_trace[1]["rejected"] > 0
    assert res.per_iteration_trace[1]["applied"] + res.per_iteration_trace[1]["rejected"] == ds.n


def test_initial_mask_limits_targets(small_donut, donut_model):
    ds = _slice(small_donut, 200)
    mask = np.zeros(ds.n, dtype=bool)
    mask[:50] = True
    res = attack.attack(donut_model, ds, attack.preset("donut_test", n_iterations=2), initial_mask=mask)
    assert np.all(res.changes["row"] < 50) and not res.fooled_mask[50:].any()


def test_restricted_attack(small_donut, donut_model):
    ds = _slice(small_donut, 400)
    part = data.find_best_single_cut(ds)
    spec = attack.RestrictionSpec.from_partition(part)
    assert np.array_equal(spec.free_mask, part.signal_mask)
    cfg = attack.preset("donut_test", n_iterations=3)
    res = attack.attack(donut_model, ds, cfg, restriction=spec)
    free_changes = res.changes[~spec.restricted_mask[res.changes["row"]]]
    assert free_changes.size > 0
    b = ds.feature_bounds
    for c in free_changes:
        edge = b[c["feature"], 1] if c["new"] > c["old"] else b[c["feature"], 0]
        assert c["new"] == edge
    rep = attack.evaluate_attack(ds, res, donut_model, restriction=spec, num_bins=cfg.num_bins)
    assert rep["n_constrained"] == spec.restricted_mask.sum()
    assert rep["mean_jsd"] == pytest.approx(res.final_mean_jsd, abs=1e-9)
    assert rep["fooling_ratio_free"] >= rep["fooling_ratio_restricted"]


def test_optimize_already_fooled_keeps_rows_fooled(small_donut, donut_model):
    ds = _slice(small_donut, 300)
    cfg = attack.preset("donut_test", n_iterations=4, optimize_already_fooled=True)
    res = attack.attack(donut_model, ds, cfg)
    mats = replay_matrices(ds.features, res.changes, cfg.n_iterations)
    clean = nn.predict(donut_model, ds.features)[1]
    was = np.zeros(ds.n, dtype=bool)
    for it in range(1, cfg.n_iterations + 1):
        now = nn.predict(donut_model, mats[it])[1] != clean
        assert np.all(now[was])
        was = now
    assert res.audit["passed"]


def test_disco_attack_audit_passes(small_donut, donut_model):
    ds = _slice(small_donut, 150)
    res = attack.attack(donut_model, ds, attack.preset("donut_test", n_iterations=2, use_disco=True,
                                                       disco_subsample_cap=100))
    assert res.audit["passed"]


# -- estimator facade ------------------------------------------------------------


def test_estimator_facade(small_donut, donut_model):
    ds = _slice(small_donut, 200)
    est = attack.ConservAttack(donut_model, min_change=0.001, num_candidates=150, num_bins=70, alpha=6.0,
                               max_jsd_single_change=0.005, max_frob_single_change=0.05, n_iterations=2)
    Xa = est.fit(ds.features).transform(ds.features)
    ref = attack.run_attack(donut_model, ds.features, attack.preset("donut_test", n_iterations=2))
    assert np.array_equal(Xa, ref.adversarial_features)
    assert clone(est).get_params()["num_candidates"] == 150
    clf = nn.MLPBinaryClassifier.from_model(donut_model)
    assert np.array_equal(attack.ConservAttack(clf, min_change=0.001, num_candidates=150, num_bins=70, alpha=6.0,
                                               max_jsd_single_change=0.005, max_frob_single_change=0.05,
                                               n_iterations=2).fit_transform(ds.features), Xa)
    with pytest.raises(ConfigError):
        attack.ConservAttack(None, step=0.1).fit(ds.features).transform(ds.features)
    with pytest.raises(ConfigError):
        attack.ConservAttack(donut_model).fit(ds.features)
