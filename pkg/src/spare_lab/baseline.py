"""Monolithic baseline: one Gaussian predictor over the whole ordered state.

Objects are laid out target first; the rest follow the ordering policy.
Evaluation goes through the same per-object log-density routine as the
relational models.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .predictor import FORMAT_VERSION, GaussianPredictor, TrainConfig, derive_seed, train_alternating
from .relational import Experience
from .rules import ObjectScope, RulePrediction

ORDERINGS = ("none", "xtheny", "stack")
ALIASES = {"random": "none", "sortedByPose": "xtheny", "oracleStack": "stack"}

BASELINE_EPOCHS = 300


class DatasetError(ValueError):
    pass


def canonical_ordering(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in ORDERINGS:
        raise ValueError(f"unknown ordering {name!r}")
    return name


def _pose_key(state, o):
    v = state.values[o]
    return (v[3], v[4], v[5], state.instance.objects[o])


def order_objects(state, targets, policy: str, rng: np.random.Generator | None = None,
                  stack_fn: Callable | None = None) -> list[int]:
    """Permutation of object indices with the targets first.

    none: the rest in random order; xtheny: sorted by x, then y, z and id;
    stack: the pushed stack bottom-up (``stack_fn(state, target)``), then the
    rest sorted as in xtheny.
    """
    policy = canonical_ordering(policy)
    targets = list(targets)
    rest = [o for o in range(state.n_objects) if o not in targets]
    if policy == "none":
        if rng is None:
            raise ValueError("random ordering needs a generator")
        return targets + [rest[i] for i in rng.permutation(len(rest))]
    if policy == "stack":
        if stack_fn is None:
            from .blocks import stack_members as stack_fn
        head = [o for o in stack_fn(state, targets[0]) if o not in targets]
        rest = [o for o in rest if o not in head]
        return targets + head + sorted(rest, key=lambda o: _pose_key(state, o))
    return targets + sorted(rest, key=lambda o: _pose_key(state, o))


@dataclass
class BaselineModel:
    predictor: GaussianPredictor
    ordering: str
    n_objects: int
    seed: int = 0

    def order(self, exp: Experience) -> list[int]:
        rng = None
        if self.ordering == "none":
            rng = np.random.default_rng(derive_seed(self.seed, exp.instance_id, exp.action.targets))
        return order_objects(exp.state, exp.action.targets, self.ordering, rng)

    def to_dict(self):
        return {"version": FORMAT_VERSION, "kind": "baseline-model", "ordering": self.ordering,
                "n_objects": self.n_objects, "seed": self.seed, "predictor": self.predictor.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION or d.get("kind") != "baseline-model":
            raise ValueError("not a version-1 baseline model")
        return cls(GaussianPredictor.from_dict(d["predictor"]), d["ordering"], int(d["n_objects"]), int(d["seed"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_size(exps, n=None):
    sizes = {e.state.n_objects for e in exps}
    if len(sizes) != 1 or (n is not None and sizes != {n}):
        raise DatasetError(f"baseline needs a fixed object count, got {sorted(sizes)}")
    return sizes.pop()


def features(model: BaselineModel, exps: Sequence[Experience]):
    orders = [model.order(e) for e in exps]
    x = np.array([np.concatenate([e.action.alpha, e.state.values[o].ravel()]) for e, o in zip(exps, orders)])
    y = np.array([e.next_state.values[o].ravel() for e, o in zip(exps, orders)])
    return x, y, orders


def train_baseline(exps: Sequence[Experience], ordering: str = "xtheny",
                   cfg: TrainConfig = TrainConfig(epochs=BASELINE_EPOCHS), weights=None) -> BaselineModel:
    """x = [alpha | ordered state], y = ordered next state."""
    n = _check_size(exps)
    shell = BaselineModel(None, canonical_ordering(ordering), n, cfg.seed)
    x, y, _ = features(shell, exps)
    shell.predictor = train_alternating(x, y, weights, cfg)
    return shell


def baseline_predictions(model: BaselineModel, exps: Sequence[Experience]) -> list[RulePrediction]:
    _check_size(exps, model.n_objects)
    x, _, orders = features(model, exps)
    mu, var = model.predictor.forward(x)
    n_props = exps[0].state.values.shape[1]
    out = []
    for k, (exp, order) in enumerate(zip(exps, orders)):
        member = np.zeros((model.n_objects, model.n_objects), dtype=np.uint8)
        member[np.arange(model.n_objects), order] = 1
        out.append(RulePrediction(exp.state.values, mu[k].reshape(-1, n_props), var[k].reshape(-1, n_props),
                                  member, np.full(n_props, model.predictor.floor)))
    return out


def eval_baseline(model: BaselineModel, exps: Sequence[Experience], scope: ObjectScope | None = None) -> np.ndarray:
    """Per-sample log-likelihood of the next state, over ``scope(exp)`` objects if given."""
    out = []
    for pred, exp in zip(baseline_predictions(model, exps), exps):
        tab = pred.table(exp.next_state.values)
        out.append(tab.sum() if scope is None else tab[list(scope(exp))].sum())
    return np.array(out)
