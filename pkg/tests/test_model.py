import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm as scipy_expm

from passmodel.attention import AttentionNetParams
from passmodel.ctmc import GeneratorMatrix
from passmodel.data import FeatureSchema, Channel, PatientRecord, Visit, BinaryChannel
from passmodel.inference import InferenceConfig, state_forecast
from passmodel.model import (EmissionParams, FixedAttention, LagAttention, LastVisitAttention, ModelParams,
                             complete_loglik, emission_loglik, emission_matrix, history_weights,
                             initial_distribution, prepare, transition_prob, truncate_weights, what_if_toggle)

from conftest import SCHEMA, random_model, random_record, ref_log_emission

CF_RATES = (0.0578, 0.0691)


def one_channel_model(rates=CF_RATES, attn=None):
    schema = FeatureSchema(continuous=(Channel("fev1"),))
    D = len(rates) + 1
    emis = EmissionParams(np.linspace(90, 40, D)[:, None], np.ones((D, 1)), np.zeros((D, 0)))
    return ModelParams(schema, GeneratorMatrix(rates), emis, attn or LastVisitAttention())


def record_at(times, values=None):
    values = values or [{} for _ in times]
    return PatientRecord("A", tuple(Visit(float(t), v) for t, v in zip(times, values)))


def test_initial_distribution_at_birth():
    np.testing.assert_array_equal(initial_distribution(one_channel_model(), 0.0), [1.0, 0.0, 0.0])


def test_initial_distribution_one_sojourn():
    assert initial_distribution(one_channel_model(), 17.30)[0] == pytest.approx(math.exp(-1), abs=1e-3)


def test_initial_distribution_negative_time():
    with pytest.raises(ValueError):
        initial_distribution(one_channel_model(), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100))
def test_initial_distribution_stochastic(t1):
    assert initial_distribution(one_channel_model(), t1).sum() == pytest.approx(1.0, abs=1e-12)


def test_degenerate_attention_equals_markov_row():
    model = random_model(np.random.default_rng(0))
    model.attn.arrays["w"][:] = 0.0
    rec = random_record(np.random.default_rng(1), 2)
    L = model.gen.dense
    for z in range(3):
        want = scipy_expm(L * (rec.times[1] - rec.times[0]))[z]
        np.testing.assert_allclose(transition_prob(model, rec, 1, [z]), want, atol=1e-12)


def test_absorbing_history_gives_absorbing_row():
    model = random_model(np.random.default_rng(2))
    rec = random_record(np.random.default_rng(3), 5)
    np.testing.assert_allclose(transition_prob(model, rec, 4, [2, 2, 2, 2]), [0, 0, 1], atol=1e-15)


def test_uniform_two_term_mixture():
    model = one_channel_model(attn=FixedAttention((0.5, 0.5)))
    rec = record_at([0.0, 5.0, 10.0])
    L = model.gen.dense
    want = 0.5 * scipy_expm(10 * L)[0] + 0.5 * scipy_expm(5 * L)[1]
    np.testing.assert_allclose(transition_prob(model, rec, 2, [0, 1]), want, atol=1e-14)


def test_transition_prob_errors():
    model = one_channel_model()
    rec = record_at([0.0, 5.0, 10.0])
    with pytest.raises(ValueError):
        transition_prob(model, rec, 2, [0, 5])
    with pytest.raises(ValueError):
        transition_prob(model, rec, 2, [0])
    with pytest.raises(IndexError):
        transition_prob(model, rec, 0, [])


def test_emission_no_channels():
    assert emission_loglik(random_model(np.random.default_rng(4)), Visit(3.0, {}), 1) == 0.0


def test_emission_gaussian_mode():
    model = one_channel_model()
    assert emission_loglik(model, Visit(1.0, {"fev1": 65.0}), 1) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_emission_matches_per_channel_sum(rng):
    model = random_model(rng)
    rec = random_record(rng, 6)
    ref = ref_log_emission(model, rec)
    E = emission_matrix(model, prepare(model.schema, rec))
    np.testing.assert_allclose(E, ref, atol=1e-10)
    for m, v in enumerate(rec.visits):
        for z in range(model.D):
            assert emission_loglik(model, v, z) == pytest.approx(ref[m, z], abs=1e-10)


def test_emission_floors():
    e = EmissionParams(np.zeros((2, 1)), np.zeros((2, 1)), np.array([[0.0], [1.0]]))
    assert e.var.min() == 1e-4
    assert e.prob.tolist() == [[1e-4], [1 - 1e-4]]


def test_complete_loglik_single_visit():
    model = one_channel_model()
    rec = record_at([12.0], [{"fev1": 70.0}])
    want = math.log(initial_distribution(model, 12.0)[1]) + emission_loglik(model, rec.visits[0], 1)
    assert complete_loglik(model, rec, [1]) == pytest.approx(want, abs=1e-12)


def test_complete_loglik_decreasing_path():
    model = one_channel_model()
    assert complete_loglik(model, record_at([1.0, 2.0]), [1, 0]) == -math.inf


def test_complete_loglik_length_mismatch():
    with pytest.raises(ValueError):
        complete_loglik(one_channel_model(), record_at([1.0, 2.0]), [0])


def test_complete_loglik_toy_by_hand():
    a = 0.4
    model = one_channel_model(rates=(a,))
    rec = record_at([2.0, 3.0, 5.0], [{"fev1": 88.0}, {}, {"fev1": 41.0}])
    # D=2: P(stay for t) = exp(-a t); the path is (0, 0, 1)
    init = math.exp(-a * 2.0)
    step1 = math.exp(-a * 1.0)
    step2 = 1 - math.exp(-a * 2.0)
    gauss = lambda x, mu: -0.5 * math.log(2 * math.pi) - 0.5 * (x - mu) ** 2
    want = math.log(init) + gauss(88, 90) + math.log(step1) + math.log(step2) + gauss(41, 40)
    assert complete_loglik(model, rec, [0, 0, 1]) == pytest.approx(want, abs=1e-12)


def test_truncate_weights():
    np.testing.assert_allclose(truncate_weights([0.5, 0.3, 0.2], 2), [0.6, 0.4])
    np.testing.assert_array_equal(truncate_weights([0.5, 0.5], 5), [0.5, 0.5])
    with pytest.raises(ValueError):
        truncate_weights([1.0, 0.0, 0.0], 2)


# -- properties ---------------------------------------------------------------------

@st.composite
def instance(draw, max_M=7):
    seed = draw(st.integers(0, 2 ** 31 - 1))
    M = draw(st.integers(2, max_M))
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    rec = random_record(rng, M)
    path = np.maximum.accumulate(rng.integers(0, 3, size=M)).tolist()
    return model, rec, path


@settings(max_examples=50, deadline=None)
@given(instance())
def test_transition_rows_stochastic_and_supported(inst):
    model, rec, path = inst
    weights = [history_weights(model, rec, m, rec.times[m]) for m in range(1, len(rec))]
    for m in range(1, len(rec)):
        p = transition_prob(model, rec, m, path, weights=weights[m - 1])
        assert abs(p.sum() - 1) <= 1e-10 and np.all((p >= 0) & (p <= 1))
        sources = [z for z, w in zip(path[:m], weights[m - 1]) if w > 0]
        assert np.all(p[:min(sources)] == 0)


def ref_hmm_path_loglik(model, rec, path):
    L = model.gen.dense
    E = ref_log_emission(model, rec)
    t = rec.times
    total = math.log(scipy_expm(L * t[0])[0, path[0]]) + E[0, path[0]]
    for m in range(1, len(rec)):
        total += math.log(scipy_expm(L * (t[m] - t[m - 1]))[path[m - 1], path[m]]) + E[m, path[m]]
    return total


@settings(max_examples=50, deadline=None)
@given(instance())
def test_hmm_reduction(inst):
    model, rec, path = inst
    hmm = model.replace(attn=LastVisitAttention())
    assert complete_loglik(hmm, rec, path) == pytest.approx(ref_hmm_path_loglik(model, rec, path), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(instance(), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=4).filter(lambda w: w[0] > 0))
def test_fixed_weight_reduction(inst, lag_weights):
    model, rec, path = inst
    model = model.replace(attn=FixedAttention(tuple(lag_weights)))
    L = model.gen.dense
    t = rec.times
    for m in range(1, len(rec)):
        lw = np.array(lag_weights[:m])
        lw = lw / lw.sum()
        want = sum(lw[j] * scipy_expm(L * (t[m] - t[m - 1 - j]))[path[m - 1 - j]] for j in range(lw.size))
        np.testing.assert_allclose(transition_prob(model, rec, m, path), want, atol=1e-10, rtol=0)


@settings(max_examples=50, deadline=None)
@given(instance(), st.integers(1, 4))
def test_lag_k_reduction(inst, k):
    model, rec, path = inst
    model = model.replace(attn=LagAttention(k))
    L = model.gen.dense
    t = rec.times
    for m in range(1, len(rec)):
        src = max(0, m - k)
        want = scipy_expm(L * (t[m] - t[src]))[path[src]]
        np.testing.assert_allclose(transition_prob(model, rec, m, path), want, atol=1e-10, rtol=0)


def test_lag_attention_validation():
    with pytest.raises(ValueError):
        LagAttention(0)
    with pytest.raises(ValueError):
        FixedAttention((0.0, 1.0))


def test_model_shape_validation():
    with pytest.raises(ValueError):
        ModelParams(SCHEMA, GeneratorMatrix((0.1,)), random_model(np.random.default_rng(0)).emis)


# -- what-if ----------------------------------------------------------------------------

def test_what_if_uniform_head_same_attention(rng):
    model = random_model(rng)
    model.attn.arrays["w"][:] = 0.0
    rec = random_record(rng, 5)
    out = what_if_toggle(model, rec, 3, "ivacaftor", 1.0)
    np.testing.assert_array_equal(out["attention_off"].weights, out["attention_on"].weights)
    np.testing.assert_allclose(out["attention_on"].weights, np.full(4, 0.25), atol=1e-15)
    assert 0 <= out["risk_off"] <= 1 and 0 <= out["risk_on"] <= 1


def test_what_if_already_active(rng):
    model = random_model(rng)
    rec = random_record(rng, 4, missing=0.0)
    rec = rec.with_value(2, "ivacaftor", 1)
    out = what_if_toggle(model, rec, 2, "ivacaftor", 1.0)
    dist, weights = state_forecast(model, rec, 2, 1.0, InferenceConfig())
    assert out["risk_on"] == float(dist[-1])
    np.testing.assert_array_equal(out["attention_on"].weights, weights.weights)


def test_what_if_toggle_changes_network_attention(rng):
    model = random_model(rng)
    rec = random_record(rng, 5, missing=0.0)
    out = what_if_toggle(model, rec, 3, "ivacaftor", 1.0)
    assert not np.array_equal(out["attention_off"].weights, out["attention_on"].weights)


def test_what_if_errors(rng):
    model = random_model(rng)
    rec = random_record(rng, 3)
    with pytest.raises(ValueError):
        what_if_toggle(model, rec, 1, "fev1")
    with pytest.raises(IndexError):
        what_if_toggle(model, rec, 3, "ivacaftor")
