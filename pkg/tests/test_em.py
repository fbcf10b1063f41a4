import json
import math

import numpy as np
import pytest

from spare_lab.blocks import DOMAIN
from spare_lab.em import (
    EmConfig,
    MixtureRule,
    ShellDistribution,
    count_shells,
    e_step,
    init_shell_distribution,
    kmeans,
    reweight_top,
    run_em,
    soft_assign,
    vote_counts,
)
from spare_lab.predictor import TrainConfig
from spare_lab.relational import RefStep

A0, A1 = RefStep("above", (0,)), RefStep("above", (1,))
FAST = TrainConfig(epochs=8, block=4, hidden=(16, 16), seed=2)


def test_kmeans_one_cluster_per_point():
    pts = np.arange(12.0).reshape(6, 2)
    res = kmeans(pts, 6, np.random.default_rng(0))
    assert res.inertia[-1] == 0.0 and sorted(res.labels.tolist()) == list(range(6))
    with pytest.raises(ValueError):
        kmeans(pts, 7, np.random.default_rng(0))


def test_soft_assign_modes():
    centers = np.array([[0.0, 0.0], [2.0, 0.0]])
    pts = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 0.0]])
    for mode in ("inv-dist", "inv-sq-dist"):
        z = soft_assign(pts, centers, mode)
        assert np.allclose(z[0], [0.5, 0.5]) and np.array_equal(z[1], [1.0, 0.0])
    assert np.allclose(soft_assign(pts, centers, "inv-dist")[2], [0.75, 0.25])
    assert np.allclose(soft_assign(pts, centers, "inv-sq-dist")[2], [0.9, 0.1])
    assert np.array_equal(soft_assign(pts[1:], centers, "discrete"), [[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        soft_assign(pts, centers, "nearest")


def test_count_shells():
    assert count_shells(DOMAIN, 1, 0) == 1
    assert count_shells(DOMAIN, 1, 2) == 1 + 4 + 4 * 8


def test_shell_distribution_init():
    one = init_shell_distribution([((), 3.0)], 0.05, 37)
    assert np.allclose(one.weights, [0.95]) and one.total == pytest.approx(1.0)
    assert one.unexplored_weight() == pytest.approx(0.05 / 36)
    eq = init_shell_distribution([((), 2.0), ((A0,), 2.0)], 0.05, 37)
    assert np.allclose(eq.weights, [0.475, 0.475])
    ratio = init_shell_distribution([((), 1.0), ((A0,), 1.0 + math.log(2))], 0.05, 37)
    assert ratio.weights[0] == pytest.approx(2 * ratio.weights[1])
    full = init_shell_distribution([((), 1.0), ((A0,), 1.0)], 0.05, 2)
    assert full.eps == 0.0 and full.total == pytest.approx(1.0)


def test_reweight_top():
    pi = ShellDistribution([(), (A0,), (A0, A1)], np.array([0.6, 0.3, 0.05]), 0.05, 10)
    top = pi.top(2)
    assert top == [0, 1]
    new = reweight_top(pi, top, np.array([3.0, 1.0]))
    assert np.allclose(new.weights, [0.675, 0.225, 0.05]) and new.total == pytest.approx(1.0)
    same = reweight_top(pi, top, np.array([2.0, 1.0]))  # votes already proportional
    assert np.allclose(same.weights, pi.weights)
    assert reweight_top(pi, top, np.zeros(2)) is pi


def test_vote_counts():
    losses = np.array([[1.0, 2.0], [3.0, 0.5], [np.inf, np.inf], [np.inf, 1.0]])
    assert vote_counts(losses, np.array([0.5, 1.0, 7.0, 2.0])).tolist() == [0.5, 3.0]


def test_e_step():
    z = np.array([[0.5, 0.5], [0.2, 0.8], [1.0, 0.0]])
    ll = np.array([[1.0, 0.0], [-3.0, -3.0], [-np.inf, 0.0]])
    out = e_step(ll, z)
    assert out[0, 0] / out[0, 1] == pytest.approx(math.e)
    assert np.allclose(out[1], z[1])                   # equal likelihoods leave z unchanged
    assert np.allclose(out[2], [0.5, 0.5])             # nothing survives: reset to uniform
    assert np.allclose(e_step(np.array([[-5.0], [2.0]]), np.ones((2, 1))), 1.0)
    big = e_step(np.array([[-1e4, -1e4 - 1]]), np.array([[0.5, 0.5]]))
    assert big[0, 0] == pytest.approx(math.e / (1 + math.e))


def _tiny_em(mixed, **kw):
    cfg = EmConfig(k=2, kappa=2, iters=1, max_refs=1, **kw)
    return run_em(DOMAIN, mixed[:90], "push", cfg, FAST)


def test_run_em_zero_iterations_keeps_z0(mixed):
    z0 = np.tile([0.3, 0.7], (90, 1))
    res = run_em(DOMAIN, mixed[:90], "push", EmConfig(k=2, kappa=2, iters=0, max_refs=1), FAST, z0=z0)
    assert np.array_equal(res.z, z0) and len(res.trace) == 1
    with pytest.raises(ValueError):
        run_em(DOMAIN, mixed[:90], "push", EmConfig(k=3, iters=0, max_refs=1), FAST, z0=z0)


def test_mixture_rule_roundtrip(mixed):
    m = _tiny_em(mixed).rules[0]
    back = MixtureRule.from_dict(json.loads(json.dumps(m.to_dict())))
    assert back.top_shells() == m.top_shells() and np.allclose(back.top_weights(), m.top_weights())
    for sh in back.top_shells():
        assert json.dumps(back.phi[sh].to_dict()) == json.dumps(m.phi[sh].to_dict())


def test_config_validation():
    with pytest.raises(ValueError):
        EmConfig(k=0)
    with pytest.raises(ValueError):
        EmConfig(eps=1.0)
    with pytest.raises(ValueError):
        EmConfig(init="random")
