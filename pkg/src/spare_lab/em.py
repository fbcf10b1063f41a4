"""Learning several rules for one template: k-means initialisation and EM.

Membership probabilities Z (samples x rules) start from k-means clusters of
[x | y | scaled loss] under a single seed rule.  Each rule then keeps a
distribution over candidate reference lists ("shells") and trained
predictors for its top-kappa shells; EM alternates shell re-weighting by
per-sample votes with a likelihood rescaling of Z.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .predictor import TrainConfig
from .relational import Domain, Experience, RefStep, extract_input, extract_output, refs_str
from .rules import (
    GreedyResult,
    SpareModel,
    TransitionRule,
    candidate_universe,
    fit_sigma_default,
    greedy_select,
    learn_dist,
    object_lists,
    rule_predictions,
    sample_logliks,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
INIT_MODES = ("discrete", "inv-dist", "inv-sq-dist")


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: list  # after every assignment step


def _plusplus(points, k, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _nearest(points, centers):
    """Labels and squared distance of each point to its nearest center."""
    labels, d2 = _kernels.kmeans_assign(points, centers)
    return labels, d2[np.arange(len(points)), labels].copy()


def kmeans(points, k: int, rng: np.random.Generator, iters: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    An empty cluster is re-seeded at the point farthest from its center,
    which never raises the inertia.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    points = np.ascontiguousarray(points, dtype=np.float64)
    if len(points) < k:
        raise ValueError("fewer points than clusters")
    centers = _plusplus(points, k, rng)
    labels, d2 = _nearest(points, centers)
    history = [float(d2.sum())]
    for _ in range(iters):
        new = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = points[members].mean(axis=0)
        counts = np.bincount(labels, minlength=k)
        for c in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(d2))
            new[c] = points[far]
            d2[far] = 0.0
        new_labels, d2 = _nearest(points, new)
        history.append(float(d2.sum()))
        centers = new
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(centers, labels, history)


def soft_assign(points, centers, mode: str) -> np.ndarray:
    """Membership rows from distances to the centers."""
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}")
    points = np.ascontiguousarray(points, dtype=np.float64)
    labels, _ = _kernels.kmeans_assign(points, np.ascontiguousarray(centers, dtype=np.float64))
    k = len(centers)
    if mode == "discrete":
        return np.eye(k)[labels]
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    z = np.empty_like(d2)
    exact = (d2 == 0).any(axis=1)
    z[exact] = (d2[exact] == 0).astype(np.float64)
    inv = 1.0 / (d2[~exact] if mode == "inv-sq-dist" else np.sqrt(d2[~exact]))
    z[~exact] = inv
    return z / z.sum(axis=1, keepdims=True)


def _padded(vec_parts, width):
    out = np.zeros(width)
    v = np.concatenate(vec_parts) if vec_parts else np.zeros(0)
    out[:len(v)] = v
    return out


def membership_features(domain: Domain, exps: Sequence[Experience], seed: SpareModel, loglik_scale: float = 1.0):
    """[x | y | loss] per sample under the seed model's main rule.

    Where a reference of the seed rule fails, the longest applicable prefix
    is used and the missing slots are zero.  Columns are z-scored before the
    loss column is multiplied by ``loglik_scale``.
    """
    rule = seed.rules[0]
    t = domain.template(rule.template)
    n_props = domain.n_props
    x_dim = t.param_dim + n_props * (t.arity + len(rule.gamma))
    y_dim = n_props * (t.arity + len(rule.delta))
    feats = np.zeros((len(exps), x_dim + y_dim + 1))
    for i, exp in enumerate(exps):
        g = rule.gamma
        while object_lists(domain, g, exp.action.targets, exp.state) is None:
            g = g[:-1]
        lists = object_lists(domain, g, exp.action.targets, exp.state)
        feats[i, :x_dim] = _padded([extract_input(domain, g, lists, exp.state, exp.action)], x_dim)
        feats[i, x_dim:x_dim + y_dim] = _padded([extract_output(lists, exp.next_state)], y_dim)
    feats[:, -1] = -sample_logliks(domain, seed, exps)
    mean, std = feats.mean(axis=0), feats.std(axis=0)
    feats = (feats - mean) / np.where(std > 1e-12, std, 1.0)
    feats[:, -1] *= loglik_scale
    return feats


def init_membership(domain: Domain, exps, seed: SpareModel, k: int, mode: str = "inv-sq-dist",
                    loglik_scale: float = 1.0, rng=None, kmeans_iters: int = 100):
    rng = np.random.default_rng(0) if rng is None else rng
    feats = membership_features(domain, exps, seed, loglik_scale)
    km = kmeans(feats, k, rng, kmeans_iters)
    return soft_assign(feats, km.centers, mode), km


# --------------------------------------------------------------------------
# shells and mixture rules
# --------------------------------------------------------------------------


def count_shells(domain: Domain, arity: int, max_refs: int) -> int:
    """Number of reference lists of length <= max_refs."""
    total, level = 1, 1
    for i in range(max_refs):
        level *= len(candidate_universe(domain, arity + i))
        total += level
    return total


@dataclass
class ShellDistribution:
    shells: list          # explored shells, as tuples of RefStep
    weights: np.ndarray   # their probabilities
    eps: float            # mass lumped over unexplored shells
    n_unexplored: int

    @property
    def total(self) -> float:
        return float(self.weights.sum() + self.eps)

    def top(self, kappa: int) -> list:
        """Indices of the kappa heaviest explored shells (ties: list order)."""
        order = sorted(range(len(self.shells)), key=lambda i: (-self.weights[i], i))
        return order[:kappa]

    def unexplored_weight(self) -> float:
        return self.eps / self.n_unexplored if self.n_unexplored else 0.0

    def to_dict(self):
        return {"shells": [[s.to_json() for s in sh] for sh in self.shells], "weights": self.weights.tolist(),
                "eps": self.eps, "n_unexplored": self.n_unexplored}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(RefStep.from_json(s) for s in sh) for sh in d["shells"]], np.array(d["weights"]),
                   float(d["eps"]), int(d["n_unexplored"]))


def init_shell_distribution(explored, eps: float = 0.05, n_shells: int | None = None) -> ShellDistribution:
    """Explored shells share 1 - eps in proportion to exp(-loss)."""
    if not explored:
        raise ValueError("need at least one explored shell")
    seen = {}
    for shell, loss in explored:
        seen[tuple(shell)] = loss
    shells = list(seen)
    losses = np.array([seen[s] for s in shells])
    w = np.exp(-(losses - losses.min()))
    n_unexp = max((n_shells or len(shells)) - len(shells), 0)
    lump = eps if n_unexp else 0.0
    return ShellDistribution(shells, (1.0 - lump) * w / w.sum(), lump, n_unexp)


@dataclass
class MixtureRule:
    template: str
    pi: ShellDistribution
    kappa: int
    phi: dict = field(default_factory=dict)    # shell -> TransitionRule
    sigma: dict = field(default_factory=dict)  # shell -> fallback variances when the shell does not apply

    def top_shells(self) -> list:
        return [self.pi.shells[i] for i in self.pi.top(self.kappa)]

    def top_weights(self) -> np.ndarray:
        w = self.pi.weights[self.pi.top(self.kappa)]
        return w / w.sum()

    def to_dict(self):
        top = self.top_shells()
        return {"template": self.template, "kappa": self.kappa, "pi": self.pi.to_dict(),
                "phi": [{"shell": [s.to_json() for s in sh], "rule": self.phi[sh].to_dict(),
                         "sigma": self.sigma[sh].tolist()} for sh in top]}

    @classmethod
    def from_dict(cls, d):
        rule = cls(d["template"], ShellDistribution.from_dict(d["pi"]), int(d["kappa"]))
        for entry in d["phi"]:
            sh = tuple(RefStep.from_json(s) for s in entry["shell"])
            rule.phi[sh] = TransitionRule.from_dict(entry["rule"])
            rule.sigma[sh] = np.array(entry["sigma"])
        return rule


def _fallback_loglik(exp: Experience, sigma: np.ndarray) -> float:
    r = exp.next_state.values - exp.state.values
    return float(-0.5 * (r * r / sigma + np.log(2 * np.pi * sigma)).sum())


def shell_logliks(domain: Domain, rule: TransitionRule, exps) -> np.ndarray:
    """Full-state log-likelihood per sample; -inf where the shell does not apply."""
    out = np.full(len(exps), -np.inf)
    for i, pred in enumerate(rule_predictions(domain, rule, exps)):
        if pred is not None:
            out[i] = pred.table(exps[i].next_state.values).sum()
    return out


def mixture_logliks(domain: Domain, mrule: MixtureRule, exps) -> np.ndarray:
    """log sum_k pi_k p_k(s'|s,a) over the top shells, pi renormalised."""
    parts = []
    for sh, w in zip(mrule.top_shells(), mrule.top_weights()):
        ll = shell_logliks(domain, mrule.phi[sh], exps)
        miss = ~np.isfinite(ll)
        if miss.any():
            ll[miss] = [_fallback_loglik(exps[i], mrule.sigma[sh]) for i in np.nonzero(miss)[0]]
        parts.append(ll + (math.log(w) if w > 0 else -np.inf))
    parts = np.array(parts)
    top = parts.max(axis=0)
    return top + np.log(np.exp(parts - top).sum(axis=0))


# --------------------------------------------------------------------------
# EM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmConfig:
    k: int = 3
    kappa: int = 3
    iters: int = 10
    eps: float = 0.05
    max_refs: int = 3
    init: str = "inv-sq-dist"
    loglik_scale: float = 1.0
    val_frac: float = 0.15
    kmeans_iters: int = 100
    z_tol: float = 0.0  # stop early when max |dZ| falls below this (0 disables)
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.kappa < 1 or self.iters < 0 or not 0 <= self.eps < 1:
            raise ValueError("invalid EM config")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init!r}")


class EmState:
    """Shared data for one EM run: split, caches, and the shell count."""

    def __init__(self, domain, exps, template, cfg: EmConfig, train_cfg: TrainConfig):
        from .rules import split
        self.domain, self.exps, self.template = domain, list(exps), template
        self.cfg, self.train_cfg = cfg, train_cfg
        idx = list(range(len(self.exps)))
        tr, va = split(idx, cfg.val_frac, cfg.seed)
        self.train_idx, self.val_idx = np.array(tr), np.array(va)
        self.train = [self.exps[i] for i in tr]
        self.val = [self.exps[i] for i in va]
        self.cache: dict = {}
        self.n_shells = count_shells(domain, domain.template(template).arity, cfg.max_refs)

    def train_shell(self, shell, z):
        rule = learn_dist(self.domain, self.train, z[self.train_idx], shell, shell, self.template,
                          self.train_cfg, self.cache)
        sigma = None
        if rule is not None:
            sigma = fit_sigma_default(self.domain, [rule], self.train, z[self.train_idx], self.train_cfg.floor)
        return rule, sigma


def init_mixture_rule(st: EmState, z: np.ndarray) -> MixtureRule:
    """Greedy search on Z-weighted data seeds the shell distribution."""
    res = greedy_select(st.domain, st.train, st.val, st.template, st.cfg.max_refs, st.train_cfg,
                        z[st.train_idx], z[st.val_idx], cache=st.cache)
    mrule = MixtureRule(st.template, init_shell_distribution(res.explored, st.cfg.eps, st.n_shells), st.cfg.kappa)
    _fill_top(st, mrule, z)
    return mrule


def _fill_top(st: EmState, mrule: MixtureRule, z, retrain: bool = False):
    """Train predictors for top shells that lack one (all of them if ``retrain``)."""
    for sh in mrule.top_shells():
        if retrain or sh not in mrule.phi:
            rule, sigma = st.train_shell(sh, z)
            if rule is None:
                # shell no longer applies to any weighted sample: drop its weight
                i = mrule.pi.shells.index(sh)
                mrule.pi.weights[i] = 0.0
                continue
            mrule.phi[sh], mrule.sigma[sh] = rule, sigma


def vote_counts(losses: np.ndarray, z: np.ndarray) -> np.ndarray:
    """V(k) = sum_i [argmin_k loss_ik == k] z_i.  Rows with no finite loss abstain."""
    v = np.zeros(losses.shape[1])
    finite = np.isfinite(losses).any(axis=1)
    best = np.argmin(np.where(np.isfinite(losses), losses, np.inf), axis=1)
    np.add.at(v, best[finite], z[finite])
    return v


def reweight_top(pi: ShellDistribution, top: list, votes: np.ndarray) -> ShellDistribution:
    """New top weights V(k)/xi, with xi keeping the top-kappa mass fixed."""
    if votes.sum() <= 0:
        return pi
    w = pi.weights.copy()
    mass = w[top].sum()
    w[top] = mass * votes / votes.sum()
    return ShellDistribution(pi.shells, w, pi.eps, pi.n_unexplored)


def m_step(st: EmState, mrule: MixtureRule, z: np.ndarray) -> MixtureRule:
    # 2a: retrain the current top shells on the weighted data
    _fill_top(st, mrule, z, retrain=True)
    # 2b: per-sample votes for the best top shell
    top_idx = mrule.pi.top(mrule.kappa)
    shells = [mrule.pi.shells[i] for i in top_idx]
    losses = np.column_stack([
        -shell_logliks(st.domain, mrule.phi[sh], st.exps) if sh in mrule.phi else np.full(len(st.exps), np.inf)
        for sh in shells])
    mrule.pi = reweight_top(mrule.pi, top_idx, vote_counts(losses, z))
    # 2c: train whatever entered the top set
    _fill_top(st, mrule, z)
    return mrule


def e_step(loglik: np.ndarray, z: np.ndarray) -> np.ndarray:
    """z_ij <- z_ij p_j(i) / zeta_i in log space; ``loglik`` is (n, K)."""
    with np.errstate(divide="ignore"):
        logz = np.log(z) + loglik
    top = logz.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0])
    top[bad] = 0.0
    out = np.exp(logz - top)
    out /= np.where(bad[:, None], 1.0, out.sum(axis=1, keepdims=True))
    if bad.any():
        log.warning("%d membership rows underflowed; reset to uniform", int(bad.sum()))
        out[bad] = 1.0 / z.shape[1]
    return out


@dataclass
class EmResult:
    rules: list
    z: np.ndarray
    trace: list  # per iteration: {"iteration", "z", "top_shells", "top_weights"}
    seed_model: SpareModel | None = None

    def spare_model(self) -> SpareModel:
        """Each rule's heaviest shell as a plain transition rule."""
        rules = [m.phi[m.top_shells()[0]] for m in self.rules if m.top_shells() and m.top_shells()[0] in m.phi]
        sigma = np.mean([m.sigma[m.top_shells()[0]] for m in self.rules], axis=0)
        return SpareModel(rules, sigma)

    def to_dict(self):
        """Mixture rules, memberships, and the plain-rule view used for evaluation."""
        return {"version": FORMAT_VERSION, "kind": "em-model", "rules": [r.to_dict() for r in self.rules],
                "z": self.z.tolist(), "spare_model": self.spare_model().to_dict()}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION or d.get("kind") != "em-model":
            raise ValueError("not a version-1 EM model")
        return cls([MixtureRule.from_dict(r) for r in d["rules"]], np.array(d["z"]), [])


def _snapshot(it, z, rules):
    return {"iteration": it, "z": z.copy(),
            "top_shells": [[refs_str(s) for s in m.top_shells()] for m in rules],
            "top_weights": [m.pi.weights[m.pi.top(m.kappa)].tolist() for m in rules]}


def run_em(domain: Domain, exps: Sequence[Experience], template: str, cfg: EmConfig = EmConfig(),
           train_cfg: TrainConfig = TrainConfig(), z0: np.ndarray | None = None) -> EmResult:
    """Seed rule, membership init (or ``z0``), shell init, then ``iters`` M/E rounds."""
    st = EmState(domain, exps, template, cfg, train_cfg)
    seed_model = None
    if z0 is None:
        seed_res: GreedyResult = greedy_select(domain, st.train, st.val, template, cfg.max_refs, train_cfg,
                                               cache=st.cache)
        seed_model = seed_res.model(domain, st.train)
        z, _ = init_membership(domain, st.exps, seed_model, cfg.k, cfg.init, cfg.loglik_scale,
                               np.random.default_rng([cfg.seed, 0x6B6D]), cfg.kmeans_iters)
    else:
        z = np.array(z0, dtype=np.float64)
        if z.shape != (len(st.exps), cfg.k):
            raise ValueError("initial membership has the wrong shape")
    rules = [init_mixture_rule(st, z[:, j]) for j in range(cfg.k)]
    trace = [_snapshot(0, z, rules)]
    for it in range(1, cfg.iters + 1):
        rules = [m_step(st, m, z[:, j]) for j, m in enumerate(rules)]
        ll = np.column_stack([mixture_logliks(domain, m, st.exps) for m in rules])
        new = e_step(ll, z)
        delta = float(np.abs(new - z).max())
        z = new
        trace.append(_snapshot(it, z, rules))
        log.info("em iteration %d: max |dZ| %.3g", it, delta)
        if cfg.z_tol > 0 and delta < cfg.z_tol:
            break
    return EmResult(rules, z, trace, seed_model)
