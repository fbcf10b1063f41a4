import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_state, stack_rows
from spare_lab.blocks import (
    SceneConfig,
    above_closure,
    generate_dataset,
    mix_counts,
    parse_mix,
    stack_height_of,
    stack_members,
    step,
    support_matrix,
)
from spare_lab.relational import ActionInstance


def _moved(exp):
    return np.nonzero(np.any(exp.next_state.values != exp.state.values, axis=1))[0].tolist()


def test_push_direction_and_distance():
    s = make_state(stack_rows(2))
    nxt = step(s, ActionInstance("push", (-0.2, 0.0, 0.0, 0.07), (0,)), 0.0, np.random.default_rng(0))
    assert np.allclose(nxt.values[:, 3], [0.07, 0.07]) and np.allclose(nxt.values[:, 4], 0.0)


def test_stack_stops_at_contact_and_hands_over():
    rows = stack_rows(2, size=0.1) + [[0.1, 0.1, 0.1, 0.15, 0.0, 0.0]]
    s = make_state(rows)
    nxt = step(s, ActionInstance("push", (-0.2, 0.0, 0.0, 0.1), (0,)), 0.0, np.random.default_rng(0))
    assert np.allclose(nxt.values[:2, 3], 0.05)
    assert np.isclose(nxt.values[2, 3], 0.2)
    # a block above the distractor's height does not collide
    high = stack_rows(1, size=0.1) + [[0.1, 0.1, 0.1, 0.15, 0.0, 0.2]]
    nxt = step(make_state(high), ActionInstance("push", (-0.2, 0.0, 0.0, 0.1), (0,)), 0.0, np.random.default_rng(0))
    assert np.isclose(nxt.values[0, 3], 0.1) and nxt.values[1, 3] == 0.15


def test_support_relations():
    s = make_state(stack_rows(3) + [[0.06, 0.06, 0.06, 0.5, 0.5, 0.0]])
    sup = support_matrix(s)
    assert sup[0, 1] and sup[1, 2] and not sup[0, 2] and not sup[:, 3].any()
    assert above_closure(s, [0]) == {1, 2}
    assert stack_members(s, 0) == [0, 1, 2]


def test_targets_bottom_of_stack():
    for exp in generate_dataset(SceneConfig(stack_height=3, n_extra=3, seed=2), 10):
        assert stack_height_of(exp) == 3
        assert exp.state.values[exp.action.targets[0], 5] == 0.0


def test_mixture_heights():
    exps = generate_dataset(SceneConfig(seed=1), 20, parse_mix("2:0.15,3:0.15,4:0.70"))
    heights = [stack_height_of(e) for e in exps]
    assert {h: heights.count(h) for h in (2, 3, 4)} == {2: 3, 3: 3, 4: 14}


@given(st.dictionaries(st.integers(1, 6), st.floats(0.01, 5), min_size=1, max_size=4), st.integers(1, 500))
def test_mix_counts_sum(mix, count):
    counts = mix_counts(mix, count)
    assert sum(counts.values()) == count
    total = sum(mix.values())
    for h, f in mix.items():
        assert abs(counts[h] - f / total * count) < 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(stack_height=0)
    with pytest.raises(ValueError):
        SceneConfig(push_range=(0.2, 0.1))
    with pytest.raises(ValueError):
        SceneConfig(target="top")
    with pytest.raises(ValueError):
        parse_mix("2:0")
