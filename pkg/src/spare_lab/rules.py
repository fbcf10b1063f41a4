"""Transition rules, SPARE models, greedy reference selection.

A rule predicts the designated objects through its Gaussian predictor and
every other object through ``N(current value, v_default)``.  A model
averages the applicable rules with the highest score; with none applicable
it falls back to ``N(s, sigma_default)``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .predictor import DEFAULT_FLOOR, GaussianPredictor, TrainConfig, fit_default_variance, train_alternating
from .relational import (
    Domain,
    Experience,
    RefStep,
    check_reference_list,
    extend_object_lists,
    extract_input,
    extract_output,
    refs_str,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

ObjectScope = Callable[[Experience], Sequence[int]]


# --------------------------------------------------------------------------
# object lists with per-state memo
# --------------------------------------------------------------------------


def object_lists(domain: Domain, refs: tuple, targets: tuple, state):
    """Memoised ``build_object_lists``; prefixes are shared across calls."""
    key = ("lists", id(domain), targets, refs)
    memo = state._memo
    if key in memo:
        return memo[key]
    if not refs:
        out = [frozenset([t]) for t in targets]
    else:
        prev = object_lists(domain, refs[:-1], targets, state)
        out = None if prev is None else extend_object_lists(domain, prev, refs[-1], state)
    memo[key] = out
    return out


# --------------------------------------------------------------------------
# rules and models
# --------------------------------------------------------------------------


@dataclass
class TransitionRule:
    template: str
    gamma: tuple
    delta: tuple
    predictor: GaussianPredictor
    v_default: np.ndarray

    def __post_init__(self):
        self.gamma, self.delta = tuple(self.gamma), tuple(self.delta)
        self.v_default = np.asarray(self.v_default, dtype=np.float64)
        if np.any(self.v_default <= 0):
            raise ValueError("default variances must be positive")

    @property
    def n_refs(self) -> int:
        return len(self.gamma) + len(self.delta)

    def lists(self, domain: Domain, exp: Experience):
        """(input lists, output lists), or None if the rule does not apply."""
        if exp.action.template != self.template:
            return None
        lin = object_lists(domain, self.gamma, exp.action.targets, exp.state)
        if lin is None:
            return None
        lout = object_lists(domain, self.delta, exp.action.targets, exp.state)
        if lout is None:
            return None
        return lin, lout

    def score(self, domain: Domain, exp: Experience) -> int:
        return 0 if self.lists(domain, exp) is None else self.n_refs + 1

    def check(self, domain: Domain):
        t = domain.template(self.template)
        check_reference_list(domain, self.gamma, t.arity)
        check_reference_list(domain, self.delta, t.arity)
        n_in = t.param_dim + domain.n_props * (t.arity + len(self.gamma))
        n_out = domain.n_props * (t.arity + len(self.delta))
        if (self.predictor.input_dim, self.predictor.output_dim) != (n_in, n_out):
            raise ValueError("predictor dimensions do not match the rule signature")

    def to_dict(self):
        return {
            "template": self.template,
            "gamma": [s.to_json() for s in self.gamma],
            "delta": [s.to_json() for s in self.delta],
            "v_default": self.v_default.tolist(),
            "predictor": self.predictor.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["template"], tuple(RefStep.from_json(s) for s in d["gamma"]),
                   tuple(RefStep.from_json(s) for s in d["delta"]),
                   GaussianPredictor.from_dict(d["predictor"]), np.array(d["v_default"]))


@dataclass
class SpareModel:
    rules: list
    sigma_default: np.ndarray

    def __post_init__(self):
        self.sigma_default = np.asarray(self.sigma_default, dtype=np.float64)
        if np.any(self.sigma_default <= 0):
            raise ValueError("sigma_default must be positive")

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "kind": "spare-model",
            "sigma_default": self.sigma_default.tolist(),
            "rules": [r.to_dict() for r in self.rules],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION or d.get("kind") != "spare-model":
            raise ValueError("not a version-1 spare model")
        return cls([TransitionRule.from_dict(r) for r in d["rules"]], np.array(d["sigma_default"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# predicted distributions
# --------------------------------------------------------------------------


@dataclass
class RulePrediction:
    """One rule's factorised prediction over the whole state.

    Object ``o`` is a uniform mixture over the output slots containing it
    (``member[s, o]``); objects in no slot get ``N(cur, vdef)``.
    """

    cur: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    member: np.ndarray
    vdef: np.ndarray

    def table(self, obs: np.ndarray) -> np.ndarray:
        return _kernels.mixture_logpdf(np.ascontiguousarray(obs, dtype=np.float64), self.cur, self.mu, self.var,
                                       self.member, self.vdef)

    def marginal(self, o: int, p: int):
        slots = np.nonzero(self.member[:, o])[0]
        if slots.size == 0:
            return np.ones(1), np.array([self.cur[o, p]]), np.array([self.vdef[p]])
        return np.full(slots.size, 1.0 / slots.size), self.mu[slots, p], self.var[slots, p]


def fallback_prediction(cur: np.ndarray, sigma: np.ndarray) -> RulePrediction:
    n_props = cur.shape[1]
    return RulePrediction(cur, np.zeros((0, n_props)), np.ones((0, n_props)),
                          np.zeros((0, cur.shape[0]), dtype=np.uint8), sigma)


@dataclass
class StateDistribution:
    """Uniform mixture of factorised rule predictions."""

    components: list

    def logpdf(self, next_values, objects=None) -> float:
        """Log density of the next state, or of the ``objects`` rows only."""
        obs = np.asarray(next_values, dtype=np.float64)
        parts = []
        for comp in self.components:
            tab = comp.table(obs)
            parts.append(tab.sum() if objects is None else tab[list(objects)].sum())
        parts = np.array(parts)
        top = parts.max()
        return float(top + np.log(np.exp(parts - top).sum()) - math.log(len(parts)))

    def marginal(self, o: int, p: int):
        """Weights, means and variances of the 1-D mixture for s'[o, p]."""
        ws, ms, vs = [], [], []
        for comp in self.components:
            w, m, v = comp.marginal(o, p)
            ws.append(w / len(self.components))
            ms.append(m)
            vs.append(v)
        return np.concatenate(ws), np.concatenate(ms), np.concatenate(vs)

    def density(self, o: int, p: int, value):
        w, m, v = self.marginal(o, p)
        value = np.asarray(value, dtype=np.float64)[..., None]
        return (w * np.exp(-0.5 * (value - m) ** 2 / v) / np.sqrt(2 * np.pi * v)).sum(axis=-1)


def _slot_member(lists, n_objects) -> np.ndarray:
    member = np.zeros((len(lists), n_objects), dtype=np.uint8)
    for s, objs in enumerate(lists):
        member[s, list(objs)] = 1
    return member


def rule_predictions(domain: Domain, rule: TransitionRule, exps: Sequence[Experience]) -> list:
    """RulePrediction per experience (None where the rule does not apply)."""
    out = [None] * len(exps)
    rows, xs, outs = [], [], []
    for i, exp in enumerate(exps):
        lists = rule.lists(domain, exp)
        if lists is None:
            continue
        rows.append(i)
        xs.append(extract_input(domain, rule.gamma, lists[0], exp.state, exp.action))
        outs.append(lists[1])
    if not rows:
        return out
    mu, var = rule.predictor.forward(np.array(xs))
    n_props = domain.n_props
    for k, i in enumerate(rows):
        exp = exps[i]
        out[i] = RulePrediction(exp.state.values, mu[k].reshape(-1, n_props), var[k].reshape(-1, n_props),
                                _slot_member(outs[k], exp.state.n_objects), rule.v_default)
    return out


def _scores(domain, rules, exps) -> np.ndarray:
    return np.array([[r.score(domain, e) for r in rules] for e in exps], dtype=np.int64).reshape(len(exps), len(rules))


def predict(domain: Domain, model: SpareModel, state, action) -> StateDistribution:
    exp = Experience(state, action, state)
    return predict_batch(domain, model, [exp])[0]


def predict_batch(domain: Domain, model: SpareModel, exps: Sequence[Experience]) -> list:
    scores = _scores(domain, model.rules, exps)
    preds = {}
    for j, rule in enumerate(model.rules):
        if np.any(scores[:, j] > 0):
            preds[j] = rule_predictions(domain, rule, exps)
    out = []
    for i, exp in enumerate(exps):
        top = scores[i].max() if len(model.rules) else 0
        if top == 0:
            out.append(StateDistribution([fallback_prediction(exp.state.values, model.sigma_default)]))
        else:
            out.append(StateDistribution([preds[j][i] for j in np.nonzero(scores[i] == top)[0]]))
    return out


def sample_logliks(domain: Domain, model: SpareModel, exps: Sequence[Experience],
                   scope: ObjectScope | None = None) -> np.ndarray:
    """log p(s' | s, a) per experience, over ``scope(exp)`` objects if given."""
    dists = predict_batch(domain, model, exps)
    return np.array([d.logpdf(e.next_state.values, None if scope is None else scope(e))
                     for d, e in zip(dists, exps)])


def loss(domain: Domain, model: SpareModel, exps: Sequence[Experience], weights=None) -> float:
    """Mean negative log-likelihood of the next states (weighted if given)."""
    if not exps:
        raise ValueError("empty experience set")
    ll = sample_logliks(domain, model, exps)
    if weights is None:
        return float(-ll.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float(-(w * ll).sum() / w.sum())


def rule_logliks(domain: Domain, rule: TransitionRule, exps: Sequence[Experience],
                 scope: ObjectScope | None = None) -> np.ndarray:
    """Per-experience log-likelihood under ``rule`` alone; NaN where it does not apply."""
    out = np.full(len(exps), np.nan)
    for i, pred in enumerate(rule_predictions(domain, rule, exps)):
        if pred is not None:
            tab = pred.table(exps[i].next_state.values)
            out[i] = tab.sum() if scope is None else tab[list(scope(exps[i]))].sum()
    return out


# --------------------------------------------------------------------------
# learning
# --------------------------------------------------------------------------


def _fingerprint(*arrays, extra="") -> str:
    h = hashlib.sha1(extra.encode())
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def learn_dist(domain: Domain, exps: Sequence[Experience], weights, gamma: tuple, delta: tuple, template: str,
               cfg: TrainConfig = TrainConfig(), cache: dict | None = None):
    """Train a rule's predictor and default variances; None if it applies nowhere.

    Only experiences the rule applies to (with positive weight) are used.
    ``cache`` maps a fingerprint of the training arrays to a finished rule.
    """
    w_all = np.ones(len(exps)) if weights is None else np.asarray(weights, dtype=np.float64)
    xs, ys, ws, sq_rows, sq_w = [], [], [], [], []
    n_props = domain.n_props
    for exp, w in zip(exps, w_all):
        if w <= 0 or exp.action.template != template:
            continue
        lin = object_lists(domain, gamma, exp.action.targets, exp.state)
        if lin is None:
            continue
        lout = object_lists(domain, delta, exp.action.targets, exp.state)
        if lout is None:
            continue
        xs.append(extract_input(domain, gamma, lin, exp.state, exp.action))
        ys.append(extract_output(lout, exp.next_state))
        ws.append(w)
        covered = frozenset().union(*lout)
        rest = [o for o in range(exp.state.n_objects) if o not in covered]
        if rest:
            sq_rows.append((exp.next_state.values[rest] - exp.state.values[rest]) ** 2)
            sq_w.append(np.full(len(rest), w))
    if len(xs) < 2:
        return None
    x, y, w = np.array(xs), np.array(ys), np.array(ws)
    key = None
    if cache is not None:
        key = _fingerprint(x, y, w, extra=repr(cfg) + refs_str(gamma) + refs_str(delta))
        if key in cache:
            return cache[key]
    pred = train_alternating(x, y, w, cfg)
    if sq_rows:
        v_default = fit_default_variance(np.concatenate(sq_rows), np.concatenate(sq_w), cfg.floor)
    else:
        v_default = np.full(n_props, cfg.floor)
    rule = TransitionRule(template, gamma, delta, pred, v_default)
    if cache is not None:
        cache[key] = rule
    return rule


def fit_sigma_default(domain: Domain, rules: Sequence[TransitionRule], exps: Sequence[Experience], weights=None,
                      floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Per-property deviation variance of the objects the model leaves in place.

    For each training experience these are the objects outside every output
    slot of the winning rules, or every object when no rule applies.  With
    no such object at all each property gets ``floor``.
    """
    w_all = np.ones(len(exps)) if weights is None else np.asarray(weights, dtype=np.float64)
    rows, rw = [], []
    for exp, w in zip(exps, w_all):
        if w <= 0:
            continue
        found = [(r.n_refs, r.lists(domain, exp)) for r in rules]
        found = [(n, l) for n, l in found if l is not None]
        covered = set()
        if found:
            top = max(n for n, _ in found)
            for n, (_, lout) in found:
                if n == top:
                    covered.update(*lout)
        rest = [o for o in range(exp.state.n_objects) if o not in covered]
        if rest:
            rows.append((exp.next_state.values[rest] - exp.state.values[rest]) ** 2)
            rw.append(np.full(len(rest), w))
    if not rows:
        return np.full(domain.n_props, floor)
    return fit_default_variance(np.concatenate(rows), np.concatenate(rw), floor)


def candidate_universe(domain: Domain, n_slots: int) -> list[RefStep]:
    """Every reference function applied to every tuple of designated slots."""
    out = []
    for fn in domain.references:
        for args in itertools.product(range(n_slots), repeat=fn.arity):
            out.append(RefStep(fn.name, tuple(args)))
    return sorted(out)


@dataclass
class GreedyResult:
    gamma: tuple
    rule: TransitionRule
    empty_rule: TransitionRule
    losses: list                      # accepted sequence L0 > L1 > ...
    explored: list                    # (shell, validation loss) for every trained shell
    steps: list = field(default_factory=list)  # per step: best candidate, its loss, accepted?
    rules: dict = field(default_factory=dict)  # shell -> trained rule

    def model(self, domain: Domain, train, weights=None) -> SpareModel:
        rules = [self.rule] if not self.gamma else [self.rule, self.empty_rule]
        return SpareModel(rules, fit_sigma_default(domain, rules, train, weights, self.rule.predictor.floor))


def _weighted_mean(vals, w):
    return float((w * vals).sum() / w.sum())


def greedy_select(domain: Domain, train: Sequence[Experience], val: Sequence[Experience], template: str,
                  max_refs: int, cfg: TrainConfig = TrainConfig(), train_weights=None, val_weights=None,
                  delta_policy: str = "same", fixed_delta: tuple = (), cache: dict | None = None,
                  keep_going: bool = False) -> GreedyResult:
    """Greedy construction of the input reference list.

    At each step every candidate reference is appended to the current list,
    a rule is trained on ``train`` and scored by weighted validation NLL;
    validation samples the candidate does not apply to are scored with the
    empty-list rule.  The best candidate is accepted only if it strictly
    lowers the loss.  ``delta_policy="same"`` uses the input list as output
    list; ``"fixed"`` keeps ``fixed_delta``.  With ``keep_going`` the search
    continues past the first rejection (for ablation curves) without
    changing the returned list.
    """
    if cache is None:
        cache = {}
    tw = np.ones(len(train)) if train_weights is None else np.asarray(train_weights, dtype=np.float64)
    vw = np.ones(len(val)) if val_weights is None else np.asarray(val_weights, dtype=np.float64)
    arity = domain.template(template).arity

    def out_refs(g):
        return g if delta_policy == "same" else tuple(fixed_delta)

    empty = learn_dist(domain, train, tw, (), out_refs(()), template, cfg, cache)
    if empty is None:
        raise ValueError("no training experience for template " + template)
    ll0 = rule_logliks(domain, empty, val)
    if np.any(np.isnan(ll0)):
        raise ValueError("validation experience the empty rule does not cover")
    L0 = -_weighted_mean(ll0, vw)
    res = GreedyResult((), empty, empty, [L0], [((), L0)], rules={(): empty})

    current, prev_loss, accepted = (), L0, True
    for i in range(1, max_refs + 1):
        best, best_loss, best_rule = None, math.inf, None
        for cand in candidate_universe(domain, arity + len(current)):
            g = current + (cand,)
            rule = learn_dist(domain, train, tw, g, out_refs(g), template, cfg, cache)
            if rule is None:
                continue
            ll = rule_logliks(domain, rule, val)
            ll = np.where(np.isnan(ll), ll0, ll)
            L = -_weighted_mean(ll, vw)
            res.explored.append((g, L))
            res.rules[g] = rule
            if L < best_loss:
                best, best_loss, best_rule = cand, L, rule
        if best is None:
            break
        ok = accepted and best_loss < prev_loss
        res.steps.append({"step": i, "candidate": str(best), "loss": best_loss, "accepted": ok,
                          "rule": best_rule})
        log.debug("greedy step %d: %s loss %.4f (%s)", i, best, best_loss, "accept" if ok else "reject")
        if ok:
            res.gamma = current + (best,)
            res.rule = best_rule
            res.losses.append(best_loss)
        else:
            accepted = False
            if not keep_going:
                break
        current, prev_loss = current + (best,), best_loss
    return res


def train_single(domain: Domain, exps: Sequence[Experience], template: str, max_refs: int,
                 cfg: TrainConfig = TrainConfig(), val_frac: float = 0.15, seed: int = 0,
                 cache: dict | None = None):
    """Split, run the greedy search, and package the result as a model."""
    train, val = split(exps, val_frac, seed)
    res = greedy_select(domain, train, val, template, max_refs, cfg, cache=cache)
    return res.model(domain, train), res


def split(items: Sequence, val_frac: float, seed: int):
    """Seeded train/validation split."""
    n = len(items)
    n_val = int(round(val_frac * n))
    perm = np.random.default_rng([seed, 0x73706C]).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [items[i] for i in range(n) if i not in val_idx]
    val = [items[i] for i in range(n) if i in val_idx]
    return train, val
