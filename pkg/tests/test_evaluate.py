import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from passmodel.ctmc import GeneratorMatrix
from passmodel.data import PatientRecord, Visit
from passmodel.evaluate import (assign_folds, attention_by_stage, attention_csv, auc_roc, calibration_bins,
                                calibration_csv, compare_models, cross_validated_eval, roc_csv, roc_points,
                                score_visits, visit_label)
from passmodel.inference import InferenceConfig
from passmodel.learning import TrainConfig
from passmodel.model import EmissionParams, LastVisitAttention, ModelParams
from passmodel.simulate import ScenarioConfig, simulate_cohort

TINY = TrainConfig(R=1, attn_steps=3, hidden_dim=4, Q=2)


@pytest.fixture(scope="module")
def sim():
    return simulate_cohort(ScenarioConfig(n_patients=50, max_visits=6, rates=(0.15, 0.2), death_mean=None, seed=2))


def truth_model(sim):
    cfg = sim.config
    mean = np.array([c.means for c in cfg.continuous]).T
    var = np.array([c.sds for c in cfg.continuous]).T ** 2
    prob = np.array([b.probs for b in cfg.binary]).T
    return ModelParams(cfg.schema, GeneratorMatrix(cfg.rates), EmissionParams(mean, var, prob), LastVisitAttention())


def test_auc_perfect():
    assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_pairs_example():
    assert auc_roc([(0.9, 1), (0.1, 0), (0.5, 1), (0.5, 0)]) == 0.875


def test_auc_random_labels():
    rng = np.random.default_rng(0)
    assert auc_roc(rng.random(10_000), rng.integers(0, 2, 10_000)) == pytest.approx(0.5, abs=0.02)


def test_auc_single_class():
    with pytest.raises(ValueError):
        auc_roc([0.1, 0.4], [1, 1])


def test_auc_bad_labels():
    with pytest.raises(ValueError):
        auc_roc([0.1, 0.4], [0, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5).map(float), st.integers(0, 1)), min_size=2, max_size=30)
       .filter(lambda xs: 0 < sum(y for _, y in xs) < len(xs)))
def test_auc_pair_count_and_monotone_invariance(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    pos, neg = s[y == 1], s[y == 0]
    want = np.mean([(a > b) + 0.5 * (a == b) for a in pos for b in neg])
    assert auc_roc(s, y) == pytest.approx(want, abs=1e-12)
    assert auc_roc(np.exp(3 * s) - 7, y) == pytest.approx(want, abs=1e-12)


def test_roc_points_shape():
    pts = roc_points([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0])
    assert pts[0].tolist() == [0, 0] and pts[-1].tolist() == [1, 1]
    assert np.all(np.diff(pts, axis=0) >= 0)
    # area under the step curve with tie segments as diagonals equals the AUC
    assert np.trapezoid(pts[:, 1], pts[:, 0]) == pytest.approx(auc_roc([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0]))


def test_calibration_bins():
    bins = calibration_bins([0.05, 0.07, 0.95, 1.0], [0, 1, 1, 1], n_bins=10)
    assert len(bins) == 10 and sum(b["n"] for b in bins) == 4
    assert bins[0]["n"] == 2 and bins[0]["observed"] == 0.5 and bins[9]["mean_risk"] == pytest.approx(0.975)
    assert bins[5]["mean_risk"] is None


def test_folds_partition():
    ids = [f"P{i}" for i in range(100)]
    folds = assign_folds(ids, 5, seed=3)
    assert [len(f) for f in folds] == [20] * 5
    assert sorted(sum(folds, [])) == sorted(ids)
    assert folds == assign_folds(list(reversed(ids)), 5, seed=3)
    assert folds != assign_folds(ids, 5, seed=4)
    with pytest.raises(ValueError):
        assign_folds(ids, 1)
    with pytest.raises(ValueError):
        assign_folds(ids[:3], 5)


def test_visit_label_rules():
    rec = PatientRecord("A", (Visit(1.0, {"d": 0}), Visit(1.5, {}), Visit(1.9, {"d": 1}), Visit(3.5, {"d": 0})))
    assert visit_label(rec, 0, "d", 1.0) == 1          # active at t=1.9 within (1, 2]
    assert visit_label(rec, 1, "d", 1.0) == 1
    assert visit_label(rec, 2, "d", 1.0) is None       # prevalent
    assert visit_label(rec, 3, "d", 1.0) is None       # no follow-up
    assert visit_label(rec, 0, "d", 0.5) is None       # the only visit in (1, 1.5] lacks the channel


def test_state_monotone_task_auc_above_chance(sim):
    model = truth_model(sim)
    scored = score_visits(model, sim.cohort.patients, ["pseudomonas"], 1.0, InferenceConfig(Q=1))
    s, y = scored["pseudomonas"]
    assert 0 < y.sum() < y.size
    assert auc_roc(s, y) > 0.5


def test_attention_by_stage_degenerate(sim):
    table, counts = attention_by_stage(sim.cohort, truth_model(sim), InferenceConfig(Q=1))
    assert table.shape == (3, 6) and counts.sum() == sum(len(p) - 1 for p in sim.cohort.patients)
    for z in range(3):
        if counts[z]:
            assert table[z].tolist() == [1, 0, 0, 0, 0, 0]
    assert np.all(table >= 0) and np.all(table.sum(axis=1) <= 1 + 1e-10)


def test_cross_validated_eval_small(sim):
    rep = cross_validated_eval(sim.cohort, TINY, ["pseudomonas", "diabetes"], 1.0, folds=5)
    assert [len(f) for f in rep.folds] == [10] * 5
    assert sorted(sum(rep.folds, [])) == sorted(p.id for p in sim.cohort.patients)
    for task in ("pseudomonas", "diabetes"):
        res = rep.tasks[task]
        assert len(res.fold_auc) == 5
        assert all(a is None or 0 <= a <= 1 for a in res.fold_auc)
        assert sum(res.fold_pos) + sum(res.fold_neg) == sum(b["n"] for b in res.calibration)
    table = np.array(rep.attention_by_stage)
    assert np.all(table.sum(axis=1) <= 1 + 1e-10)
    js = rep.to_json()
    assert js["fold_sizes"] == [10] * 5
    assert roc_csv(rep).startswith("task,fpr,tpr\n")
    assert calibration_csv(rep).count("\n") == 1 + 2 * 10
    assert attention_csv(rep.attention_by_stage, rep.stage_counts).splitlines()[0] == \
        "stage,n_visits,lag1,lag2,lag3,lag4,lag5,lag6"


def test_single_class_folds_skipped(sim):
    cohort = sim.cohort
    never = type(cohort)(cohort.schema, tuple(
        PatientRecord(p.id, tuple(Visit(v.time, {**v.values, "abpa": 0}) for v in p.visits), p.statics, p.death_time)
        for p in cohort.patients))
    rep = cross_validated_eval(never, TINY, ["abpa"], 1.0, folds=2, model="hmm")
    assert rep.tasks["abpa"].fold_auc == [None, None]
    assert len(rep.warnings) == 2 and "single class" in rep.warnings[0]
    assert np.isnan(rep.tasks["abpa"].auc_mean)


def test_unknown_task(sim):
    with pytest.raises(KeyError):
        cross_validated_eval(sim.cohort, TINY, ["fev1"], 1.0)


def test_unknown_model_kind(sim):
    with pytest.raises(ValueError):
        cross_validated_eval(sim.cohort, TINY, ["diabetes"], 1.0, folds=2, model="rnn")


def test_compare_models_pairs_folds(sim):
    res = compare_models(sim.cohort, TINY, ["pseudomonas"], 1.0, folds=2)
    assert res["pass"].folds == res["hmm"].folds
    paired = res["paired"]["pseudomonas"]
    a, b = res["pass"].tasks["pseudomonas"].fold_auc, res["hmm"].tasks["pseudomonas"].fold_auc
    assert paired["fold_diff"] == pytest.approx([x - y for x, y in zip(a, b)])
