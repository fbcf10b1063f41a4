import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_exp, make_state, stack_rows
from spare_lab.blocks import DOMAIN, SceneConfig, generate_dataset
from spare_lab.relational import (
    AGGREGATORS,
    DATASET_FIELDS,
    ActionTemplate,
    Domain,
    DomainError,
    RefStep,
    ReferenceFunction,
    build_object_lists,
    check_reference_list,
    experience_from_json,
    experience_to_json,
    extract_input,
    extract_output,
    input_dim,
    output_dim,
    read_dataset,
    refs_str,
    within_radius,
    write_dataset,
)

A0, A1, A2 = RefStep("above", (0,)), RefStep("above", (1,)), RefStep("above", (2,))


def test_aggregators():
    rows = np.array([[1.0, 4.0], [3.0, 2.0]])
    assert AGGREGATORS["mean"](rows).tolist() == [2.0, 3.0]
    assert AGGREGATORS["max"](rows).tolist() == [3.0, 4.0]
    assert AGGREGATORS["cardinality"](rows).tolist() == [2.0, 2.0]


def test_domain_validation():
    with pytest.raises(DomainError):
        Domain(("a", "a"), (), ())
    with pytest.raises(DomainError):
        ReferenceFunction("f", 0, lambda s, a: [])
    with pytest.raises(DomainError):
        ReferenceFunction("f", 1, lambda s, a: [], aggregator="median")
    with pytest.raises(DomainError):
        ActionTemplate("t", -1, 1)
    with pytest.raises(DomainError):
        DOMAIN.reference("left-of")


def test_state_validation():
    with pytest.raises(DomainError):
        make_state([[0.0] * 5])
    with pytest.raises(DomainError):
        make_state([[np.nan] * 6])
    s = make_state(stack_rows(2))
    assert s[1, "z"] == pytest.approx(0.06)
    with pytest.raises(ValueError):
        s.values[0, 0] = 1.0


def test_object_lists_on_a_stack():
    s = make_state(stack_rows(3))
    assert build_object_lists(DOMAIN, (), (0,), s) == [{0}]
    assert build_object_lists(DOMAIN, (A0,), (0,), s) == [{0}, {1}]
    assert build_object_lists(DOMAIN, (A0, A1), (0,), s) == [{0}, {1}, {2}]
    assert build_object_lists(DOMAIN, (A0, A1, A2), (0,), s) is None
    star = RefStep("above*", (0,))
    assert build_object_lists(DOMAIN, (star,), (0,), s) == [{0}, {1, 2}]
    assert build_object_lists(DOMAIN, (RefStep("below", (0,)),), (2,), s) == [{2}, {1}]
    assert build_object_lists(DOMAIN, (RefStep("below", (0,)),), (0,), s) is None


def test_nearest_and_radius():
    rows = stack_rows(1) + [[0.05] * 3 + [0.3, 0.0, 0.0], [0.05] * 3 + [0.0, 0.2, 0.0]]
    s = make_state(rows)
    assert build_object_lists(DOMAIN, (RefStep("nearest", (0,)),), (0,), s)[1] == {2}
    near = within_radius(0.25, [3, 4, 5])
    assert set(near.select(s, (frozenset([0]),))) == {2}
    assert set(within_radius(0.2, [3, 4, 5]).select(s, (frozenset([0]),))) == set()  # strict


def test_check_reference_list():
    check_reference_list(DOMAIN, (A0, A1), 1)
    with pytest.raises(DomainError):
        check_reference_list(DOMAIN, (A1,), 1)  # slot 1 not designated yet
    with pytest.raises(DomainError):
        check_reference_list(DOMAIN, (RefStep("above", (0, 0)),), 1)
    with pytest.raises(DomainError):
        check_reference_list(DOMAIN, (A0, A1), 1, max_len=1)


def test_feature_dimensions_and_values():
    rows = stack_rows(3)
    nxt = np.array(rows)
    nxt[:, 3] += 0.05
    exp = make_exp(rows, nxt)
    assert input_dim(DOMAIN, (A0, A1), "push") == 4 + 6 * 3 == 22
    assert output_dim(DOMAIN, (A0, A1), "push") == 18
    lists = build_object_lists(DOMAIN, (A0, A1), (0,), exp.state)
    x = extract_input(DOMAIN, (A0, A1), lists, exp.state, exp.action)
    y = extract_output(lists, exp.next_state)
    assert x.shape == (22,) and y.shape == (18,)
    assert x[:4].tolist() == list(exp.action.alpha)
    assert np.array_equal(x[4:], np.array(rows).ravel())
    assert np.array_equal(y, nxt.ravel())
    star = RefStep("above*", (0,))
    lists = build_object_lists(DOMAIN, (star,), (0,), exp.state)
    x = extract_input(DOMAIN, (star,), lists, exp.state, exp.action)
    assert np.allclose(x[10:], np.mean(rows[1:], axis=0))


def test_refs_str_and_json():
    assert refs_str((A0, RefStep("nearest", (1,)))) == "[above(O0), nearest(O1)]"
    assert RefStep.from_json(A1.to_json()) == A1


def test_dataset_roundtrip(tmp_path):
    exps = generate_dataset(SceneConfig(n_extra=2, seed=3), 5)
    path = tmp_path / "d.jsonl"
    write_dataset(path, exps)
    back = read_dataset(path, DOMAIN)
    for a, b in zip(exps, back):
        assert np.array_equal(a.state.values, b.state.values)
        assert np.array_equal(a.next_state.values, b.next_state.values)
        assert a.action == b.action and a.state.instance.objects == b.state.instance.objects
        assert experience_to_json(a) == experience_to_json(b)
    line = path.read_text().splitlines()[0]
    assert tuple(json.loads(line)) == DATASET_FIELDS


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_dataset_numbers_are_exact(v):
    rows = np.array(stack_rows(2))
    rows[0, 3] = v
    exp = make_exp(rows, rows)
    back = experience_from_json(experience_to_json(exp), DOMAIN)
    assert back.state.values[0, 3] == v


def test_dataset_rejects_foreign_properties():
    exp = make_exp(stack_rows(2), stack_rows(2))
    d = json.loads(experience_to_json(exp))
    d["props"] = ["a", "b", "c", "d", "e", "f"]
    with pytest.raises(DomainError):
        experience_from_json(json.dumps(d), DOMAIN)
