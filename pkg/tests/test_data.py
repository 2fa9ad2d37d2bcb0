import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from passmodel.data import (BinaryChannel, Channel, Cohort, CohortError, FeatureSchema, PatientRecord,
                            StaticChannel, Visit, augmented_input, dumps_cohort, load_cohort, save_cohort)
from passmodel.simulate import ScenarioConfig, simulate_cohort

from conftest import SCHEMA


def write_lines(path, objs):
    path.write_text("\n".join(json.dumps(o) for o in objs) + "\n")


def test_load_two_visits(tmp_path):
    f = tmp_path / "c.jsonl"
    write_lines(f, [{"schema": SCHEMA.to_json()},
                    {"id": "A", "statics": {"sex": 1}, "visits": [{"t": 10.0, "values": {"fev1": 80.0}},
                                                               {"t": 11.5, "values": {}}]}])
    c = load_cohort(f)
    assert len(c) == 1 and len(c.patients[0]) == 2
    assert c.patients[0].times.tolist() == [10.0, 11.5]


def test_load_rejects_decreasing_times(tmp_path):
    f = tmp_path / "c.jsonl"
    write_lines(f, [{"schema": SCHEMA.to_json()},
                    {"id": "A", "visits": [{"t": 11.5, "values": {}}, {"t": 10.0, "values": {}}]}])
    with pytest.raises(CohortError, match="A.*not strictly increasing"):
        load_cohort(f)


def test_missing_channel_stays_absent(tmp_path):
    f = tmp_path / "c.jsonl"
    write_lines(f, [{"schema": SCHEMA.to_json()},
                    {"id": "A", "visits": [{"t": 1.0, "values": {"fev1": 70.0}}, {"t": 2.0, "values": {"bmi": 20.0}}]}])
    c = load_cohort(f)
    assert "fev1" not in c.patients[0].visits[1].values
    g = tmp_path / "d.jsonl"
    save_cohort(c, g)
    assert load_cohort(g) == c


def test_parse_error_names_line(tmp_path):
    f = tmp_path / "c.jsonl"
    f.write_text(json.dumps({"schema": SCHEMA.to_json()}) + "\n{not json\n")
    with pytest.raises(CohortError, match="line 2"):
        load_cohort(f)


def test_schema_violation_names_channel_and_patient(tmp_path):
    f = tmp_path / "c.jsonl"
    write_lines(f, [{"schema": SCHEMA.to_json()}, {"id": "Q7", "visits": [{"t": 1.0, "values": {"crp": 3.0}}]}])
    with pytest.raises(CohortError, match="Q7.*crp"):
        load_cohort(f)


def test_binary_values_must_be_indicators():
    rec = PatientRecord("A", (Visit(1.0, {"diabetes": 2}),))
    with pytest.raises(CohortError, match="diabetes"):
        Cohort(SCHEMA, (rec,))


def test_empty_cohort_round_trip(tmp_path):
    f = tmp_path / "e.jsonl"
    save_cohort(Cohort(SCHEMA, ()), f)
    assert f.read_text().count("\n") == 1
    assert load_cohort(f) == Cohort(SCHEMA, ())


def test_simulated_cohort_round_trip(tmp_path):
    sim = simulate_cohort(ScenarioConfig(n_patients=100, missingness=0.3, seed=3))
    f = tmp_path / "s.jsonl"
    save_cohort(sim.cohort, f)
    assert load_cohort(f) == sim.cohort
    assert dumps_cohort(load_cohort(f)) == f.read_text()


def test_duplicate_names_rejected():
    with pytest.raises(CohortError):
        FeatureSchema(continuous=(Channel("x"),), binary=(BinaryChannel("x"),))


def test_duplicate_ids_rejected():
    rec = PatientRecord("A", (Visit(1.0, {}),))
    with pytest.raises(CohortError):
        Cohort(SCHEMA, (rec, rec))


def test_death_before_last_visit_rejected():
    with pytest.raises(CohortError, match="death"):
        PatientRecord("A", (Visit(1.0, {}), Visit(2.0, {})), death_time=1.5)


def test_augmented_input_layout():
    schema = FeatureSchema(continuous=(Channel("fev1"),),
                           binary=(BinaryChannel("a"), BinaryChannel("b"), BinaryChannel("c")),
                           static=(StaticChannel("s1"), StaticChannel("s2", "indicator")))
    rec = PatientRecord("A", (Visit(12.5, {"a": 1, "c": 0}),), {"s1": 0.3, "s2": 1})
    x = augmented_input(schema, rec, 0)
    assert x.size == 2 + 2 + 6 + 1 == schema.input_dim
    # statics, fev1 absent, a present, b absent, c present, time
    assert x.tolist() == [0.3, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 12.5]


def test_augmented_input_all_observed_flags():
    rec = PatientRecord("A", (Visit(3.0, {"fev1": 80.0, "bmi": 20.0, "ivacaftor": 0, "diabetes": 1}),), {"sex": 1})
    x = augmented_input(SCHEMA, rec, 0)
    assert x[[2, 4, 6, 8]].tolist() == [1.0, 1.0, 1.0, 1.0]


def test_augmented_input_index_error():
    rec = PatientRecord("A", (Visit(3.0, {}),))
    with pytest.raises(IndexError):
        augmented_input(SCHEMA, rec, 1)


visit_values = st.fixed_dictionaries({}, optional={
    "fev1": st.floats(-1e6, 1e6, allow_nan=False),
    "bmi": st.floats(-1e6, 1e6, allow_nan=False),
    "ivacaftor": st.sampled_from([0, 1]),
    "diabetes": st.sampled_from([0, 1]),
})


@st.composite
def records(draw, pid="A"):
    n = draw(st.integers(1, 6))
    gaps = draw(st.lists(st.floats(1e-3, 10.0), min_size=n, max_size=n))
    times = np.cumsum(gaps)
    visits = tuple(Visit(float(t), draw(visit_values)) for t in times)
    return PatientRecord(pid, visits, {"sex": draw(st.sampled_from([0, 1]))})


@settings(max_examples=60, deadline=None)
@given(st.lists(records(), min_size=0, max_size=4))
def test_round_trip_property(tmp_path_factory, recs):
    recs = [PatientRecord(f"P{i}", r.visits, r.statics) for i, r in enumerate(recs)]
    c = Cohort(SCHEMA, tuple(recs))
    f = tmp_path_factory.mktemp("rt") / "c.jsonl"
    save_cohort(c, f)
    assert load_cohort(f) == c


@settings(max_examples=60, deadline=None)
@given(records())
def test_presence_flags_match_mask(rec):
    names = SCHEMA.continuous_names + SCHEMA.binary_names
    for j, v in enumerate(rec.visits):
        x = augmented_input(SCHEMA, rec, j)
        assert x.size == SCHEMA.input_dim
        flags = x[2:2 + 2 * len(names):2]
        assert flags.tolist() == [float(n in v.values) for n in names]
