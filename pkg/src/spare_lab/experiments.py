"""Desk-scale experiment recipes, metric rows, export and acceptance checks.

Every experiment is a list of independent units (one per seed, or per seed
and sweep point).  Units run in a process pool capped by ``SPARE_LAB_THREADS``
and their rows are concatenated in unit order, so the table does not depend
on the worker count.

Log-likelihoods are per-sample means of the summed per-(object, property)
log-densities; "stack" metrics sum only over the pushed stack's blocks.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .baseline import eval_baseline, train_baseline
from .blocks import DOMAIN, SceneConfig, generate_dataset, parse_mix, stack_height_of, stack_members
from .em import EmConfig, init_membership, run_em
from .predictor import TrainConfig, derive_seed
from .rules import SpareModel, fit_sigma_default, greedy_select, sample_logliks, split

log = logging.getLogger(__name__)

EXPERIMENTS = ("ref-ablation", "distractor-sweep", "sample-efficiency", "em-separation", "ordering-study",
               "init-tables")
METRICS_VERSION = 1
CSV_HEADER = ("experiment", "seed", "sweep", "x", "metric", "value")
CSV_NOTE = (f"# spare-lab metrics v{METRICS_VERSION}; log-likelihoods are per-sample means of summed "
            "per-(object, property) log-densities")


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "ref-ablation"
    seeds: tuple[int, ...] = (1, 2, 3)
    n_train: int = 1250
    n_test: int = 250
    val_frac: float = 0.15
    stack_height: int = 3
    extras: tuple[int, ...] = (0, 2, 4, 6)
    cluttered_extras: int = 4
    spare_sizes: tuple[int, ...] = (100, 250, 500, 1000, 1250)
    baseline_sizes: tuple[int, ...] = (100, 250, 500, 1000, 1250, 5000)
    orderings: tuple[str, ...] = ("none", "xtheny", "stack")
    ablation_max_refs: int = 4
    sweep_max_refs: int = 2
    em_max_refs: int = 3
    epochs: int = 100
    baseline_epochs: int = 300
    floor: float = 1e-4
    em_mix: str = "2:0.15,3:0.15,4:0.70"
    em_samples: int = 1000
    em_init_target: float = 0.7
    em_iters: int = 10
    k: int = 3
    kappa: int = 3
    eps: float = 0.05
    table_mix: str = "2:1,3:1,4:1"
    table_samples: int = 1250
    table_scales: tuple[float, ...] = (1.0, 5.0)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.n_train < 2 or self.n_test < 1 or not 0 < self.val_frac < 1:
            raise ValueError("invalid dataset sizes")

    def train_cfg(self, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=epochs or self.epochs, floor=self.floor, seed=seed)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        return tuple(kind(t.strip()) for t in text.split(",") if t.strip())
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    return type(default)(text)


def parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ValueError(f"expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v
    return out


def read_config_file(path) -> dict:
    """key = value lines; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                out.update(parse_overrides([line]))
    return out


def make_config(name: str, values: dict | None = None) -> ExperimentConfig:
    base = ExperimentConfig(name=name)
    known = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    kw = {}
    for k, v in (values or {}).items():
        if k not in known:
            raise ValueError(f"unknown config key {k!r}")
        kw[k] = _parse_value(v, known[k]) if isinstance(v, str) else v
    kw["name"] = name
    return replace(base, **kw)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(t) for t in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# rows and export
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    seed: int
    sweep: str
    x: float
    metric: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite metric {self.metric} = {self.value}")


def rows_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(CSV_NOTE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.experiment, r.seed, r.sweep, repr(float(r.x)), r.metric, repr(float(r.value))])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricsRow]:
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    reader = csv.reader(lines)
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected metrics header {header}")
    return [MetricsRow(e, int(s), sw, float(x), m, float(v)) for e, s, sw, x, m, v in reader]


def rows_to_json(rows: Sequence[MetricsRow]) -> str:
    return json.dumps({"version": METRICS_VERSION, "kind": "metrics", "rows": [asdict(r) for r in rows]},
                      sort_keys=True)


def rows_from_json(text: str) -> list[MetricsRow]:
    d = json.loads(text)
    if d.get("version") != METRICS_VERSION or d.get("kind") != "metrics":
        raise ValueError("not a version-1 metrics file")
    return [MetricsRow(**r) for r in d["rows"]]


def export_metrics(rows: Sequence[MetricsRow], path, fmt: str | None = None) -> None:
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    text = rows_to_json(rows) if fmt == "json" else rows_to_csv(rows)
    with open(path, "w", newline="") as f:
        f.write(text)


def load_metrics(path) -> list[MetricsRow]:
    with open(path) as f:
        text = f.read()
    return rows_from_json(text) if str(path).endswith(".json") else rows_from_csv(text)


# --------------------------------------------------------------------------
# datasets and shared evaluation
# --------------------------------------------------------------------------


def stack_scope(exp):
    return stack_members(exp.state, exp.action.targets[0])


@lru_cache(maxsize=32)
def dataset(role: str, seed: int, count: int, stack_height: int = 3, n_extra: int = 0, mix: str = ""):
    """Seeded recipe; train and test draws use different scene seeds."""
    scene = SceneConfig(stack_height=stack_height, n_extra=n_extra,
                        seed=derive_seed(role, seed, stack_height, n_extra, mix))
    return tuple(generate_dataset(scene, count, parse_mix(mix) if mix else None))


def spare_lls(model: SpareModel, test) -> tuple[float, float]:
    ll_all = sample_logliks(DOMAIN, model, test)
    ll_stack = sample_logliks(DOMAIN, model, test, stack_scope)
    return float(ll_stack.mean()), float(ll_all.mean())


@lru_cache(maxsize=128)
def baseline_lls(seed: int, n: int, n_extra: int, ordering: str, epochs: int, floor: float,
                 n_test: int, stack_height: int = 3) -> tuple[float, float]:
    """Train on the first ``n`` of the seed's pool, evaluate on its test set."""
    train = list(dataset("train", seed, n, stack_height, n_extra))
    test = list(dataset("test", seed, n_test, stack_height, n_extra))
    model = train_baseline(train, ordering, TrainConfig(epochs=epochs, floor=floor, seed=seed))
    return float(eval_baseline(model, test, stack_scope).mean()), float(eval_baseline(model, test).mean())


def fit_spare(cfg: ExperimentConfig, seed: int, exps, max_refs: int, keep_going: bool = False):
    train, val = split(list(exps), cfg.val_frac, seed)
    res = greedy_select(DOMAIN, train, val, "push", max_refs, cfg.train_cfg(seed), keep_going=keep_going)
    return res, train


def _rms_std(v) -> float:
    return float(np.sqrt(np.mean(v)))


# --------------------------------------------------------------------------
# units
# --------------------------------------------------------------------------


def _row(cfg, seed, sweep, x, metric, value):
    return MetricsRow(cfg.name, seed, sweep, float(x), metric, float(value))


def unit_ref_ablation(cfg: ExperimentConfig, seed: int) -> list[MetricsRow]:
    data = dataset("train", seed, cfg.n_train, cfg.stack_height)
    test = list(dataset("test", seed, cfg.n_test, cfg.stack_height))
    res, train = fit_spare(cfg, seed, data, cfg.ablation_max_refs, keep_going=True)
    rows = [_row(cfg, seed, "refs", 0, "val_nll", res.losses[0]), _row(cfg, seed, "refs", 0, "accepted", 1)]
    steps = [(0, res.empty_rule, True)] + [(s["step"], s["rule"], s["accepted"]) for s in res.steps]
    for k, rule, ok in steps:
        rules = [rule] if k == 0 else [rule, res.empty_rule]
        model = SpareModel(rules, fit_sigma_default(DOMAIN, rules, train, None, cfg.floor))
        rows.append(_row(cfg, seed, "refs", k, "test_nll", -sample_logliks(DOMAIN, model, test).mean()))
        rows.append(_row(cfg, seed, "refs", k, "default_std", _rms_std(rule.v_default)))
        if k:
            rows.append(_row(cfg, seed, "refs", k, "val_nll", res.steps[k - 1]["loss"]))
            rows.append(_row(cfg, seed, "refs", k, "accepted", ok))
    rows.append(_row(cfg, seed, "refs", len(res.gamma), "n_accepted", len(res.gamma)))
    log.info("ref-ablation seed %d: selected %s", seed, [str(g) for g in res.gamma])
    return rows


def unit_clutter(cfg: ExperimentConfig, seed: int, n_extra: int) -> list[MetricsRow]:
    """SPARE and the xtheny baseline at one distractor count."""
    data = dataset("train", seed, cfg.n_train, cfg.stack_height, n_extra)
    test = list(dataset("test", seed, cfg.n_test, cfg.stack_height, n_extra))
    res, train = fit_spare(cfg, seed, data, cfg.sweep_max_refs)
    st, al = spare_lls(res.model(DOMAIN, train), test)
    bst, bal = baseline_lls(seed, cfg.n_train, n_extra, "xtheny", cfg.baseline_epochs, cfg.floor, cfg.n_test,
                            cfg.stack_height)
    return [_row(cfg, seed, "extras", n_extra, "spare_ll_stack", st), _row(cfg, seed, "extras", n_extra, "spare_ll_all", al),
            _row(cfg, seed, "extras", n_extra, "baseline_ll_stack", bst),
            _row(cfg, seed, "extras", n_extra, "baseline_ll_all", bal),
            _row(cfg, seed, "extras", n_extra, "spare_n_refs", len(res.gamma))]


def unit_ordering(cfg: ExperimentConfig, seed: int, n_extra: int) -> list[MetricsRow]:
    rows = []
    for o in cfg.orderings:
        st, al = baseline_lls(seed, cfg.n_train, n_extra, o, cfg.baseline_epochs, cfg.floor, cfg.n_test,
                              cfg.stack_height)
        rows += [_row(cfg, seed, "extras", n_extra, f"baseline_ll_stack_{o}", st),
                 _row(cfg, seed, "extras", n_extra, f"baseline_ll_all_{o}", al)]
    return rows


def unit_sample_efficiency(cfg: ExperimentConfig, seed: int) -> list[MetricsRow]:
    """Nested prefixes of one training pool on the cluttered recipe."""
    e = cfg.cluttered_extras
    test = list(dataset("test", seed, cfg.n_test, cfg.stack_height, e))
    rows = []
    for n in cfg.spare_sizes:
        data = dataset("train", seed, n, cfg.stack_height, e)
        res, train = fit_spare(cfg, seed, data, cfg.sweep_max_refs)
        st, al = spare_lls(res.model(DOMAIN, train), test)
        rows += [_row(cfg, seed, "n_train", n, "spare_ll_stack", st), _row(cfg, seed, "n_train", n, "spare_ll_all", al)]
    for n in cfg.baseline_sizes:
        st, al = baseline_lls(seed, n, e, "xtheny", cfg.baseline_epochs, cfg.floor, cfg.n_test, cfg.stack_height)
        rows += [_row(cfg, seed, "n_train", n, "baseline_ll_stack", st),
                 _row(cfg, seed, "n_train", n, "baseline_ll_all", al)]
    return rows


def oracle_membership(heights: Sequence[int], target: float, k: int) -> tuple[np.ndarray, list[int]]:
    """``target`` on the rule assigned to each sample's height, the rest spread evenly."""
    levels = sorted(set(heights))
    if len(levels) > k:
        raise ValueError("more stack heights than rules")
    z = np.full((len(heights), k), (1.0 - target) / (k - 1) if k > 1 else 1.0)
    for i, h in enumerate(heights):
        z[i, levels.index(h)] = target if k > 1 else 1.0
    return z, levels


def membership_by_height(z: np.ndarray, heights: np.ndarray, levels) -> np.ndarray:
    """(height, rule) table of mean membership."""
    return np.array([z[heights == h].mean(axis=0) for h in levels])


def unit_em_separation(cfg: ExperimentConfig, seed: int) -> list[MetricsRow]:
    exps = list(dataset("train", seed, cfg.em_samples, mix=cfg.em_mix))
    heights = np.array([stack_height_of(e) for e in exps])
    z0, levels = oracle_membership(heights, cfg.em_init_target, cfg.k)
    em_cfg = EmConfig(k=cfg.k, kappa=cfg.kappa, iters=cfg.em_iters, eps=cfg.eps, max_refs=cfg.em_max_refs,
                      val_frac=cfg.val_frac, seed=seed)
    res = run_em(DOMAIN, exps, "push", em_cfg, cfg.train_cfg(seed), z0=z0)
    rows = []
    for snap in res.trace:
        tab = membership_by_height(snap["z"], heights, levels)
        for j, h in enumerate(levels):
            rows.append(_row(cfg, seed, "iteration", snap["iteration"], f"membership_h{h}", tab[j, j]))
        for j, w in enumerate(snap["top_weights"]):
            rows.append(_row(cfg, seed, "iteration", snap["iteration"], f"pi_top_rule{j}", sum(w)))
    for j, m in enumerate(res.rules):
        log.info("em seed %d rule %d: %s", seed, j, res.trace[-1]["top_shells"][j])
    return rows


def cluster_table(z: np.ndarray, heights: np.ndarray, levels, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean membership per (height, cluster), columns matched to heights.

    The matching maximises the diagonal of the hard-assignment table built
    from ``labels`` (Hungarian method), so soft and hard tables of the same
    clustering share one column order.
    """
    k = z.shape[1]
    hard = membership_by_height(np.eye(k)[labels], heights, levels)
    _, cols = linear_sum_assignment(-hard)
    order = list(cols) + [c for c in range(k) if c not in cols]
    return membership_by_height(z, heights, levels)[:, order], np.array(order)


def unit_init_tables(cfg: ExperimentConfig, seed: int) -> list[MetricsRow]:
    exps = list(dataset("train", seed, cfg.table_samples, mix=cfg.table_mix))
    heights = np.array([stack_height_of(e) for e in exps])
    levels = sorted(set(heights.tolist()))
    res, train = fit_spare(cfg, seed, exps, cfg.em_max_refs)
    seed_model = res.model(DOMAIN, train)
    log.info("init-tables seed %d: seed rule %s", seed, [str(g) for g in res.gamma])
    rows = []
    for scale in cfg.table_scales:
        for mode in ("discrete", "inv-dist", "inv-sq-dist"):
            rng = np.random.default_rng([seed, 0x6B6D])
            z, km = init_membership(DOMAIN, exps, seed_model, cfg.k, mode, scale, rng)
            tab, _ = cluster_table(z, heights, levels, km.labels)
            for i, h in enumerate(levels):
                for c in range(tab.shape[1]):
                    rows.append(_row(cfg, seed, "height", h, f"{mode}_s{scale:g}_c{c}", tab[i, c]))
    return rows


UNITS: dict[str, Callable] = {
    "ref-ablation": unit_ref_ablation,
    "distractor-sweep": unit_clutter,
    "sample-efficiency": unit_sample_efficiency,
    "em-separation": unit_em_separation,
    "ordering-study": unit_ordering,
    "init-tables": unit_init_tables,
}


def plan(cfg: ExperimentConfig) -> list[tuple]:
    if cfg.name in ("distractor-sweep", "ordering-study"):
        return [(s, e) for s in cfg.seeds for e in cfg.extras]
    return [(s,) for s in cfg.seeds]


def _run_unit(cfg: ExperimentConfig, args: tuple) -> list[MetricsRow]:
    try:
        return UNITS[cfg.name](cfg, *args)
    except Exception as exc:
        raise RuntimeError(f"{cfg.name} unit {args} failed: {exc}") from exc


def worker_count(n_units: int) -> int:
    cap = os.environ.get("SPARE_LAB_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, n_units))


def run_experiment(cfg: ExperimentConfig) -> list[MetricsRow]:
    units = plan(cfg)
    workers = worker_count(len(units))
    t = time.time()
    if workers == 1:
        parts = [_run_unit(cfg, u) for u in units]
    else:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_unit, [cfg] * len(units), units))
    log.info("%s: %d units in %.0f s on %d workers", cfg.name, len(units), time.time() - t, workers)
    return [r for p in parts for r in p]


# --------------------------------------------------------------------------
# acceptance checks
# --------------------------------------------------------------------------


@dataclass
class CheckResult:
    criterion: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.criterion}: {self.detail}"


def series(rows, metric: str, seed: int | None = None) -> dict[float, float]:
    """x -> value for one metric (seed-averaged when ``seed`` is None)."""
    acc: dict[float, list] = {}
    for r in rows:
        if r.metric == metric and (seed is None or r.seed == seed):
            acc.setdefault(r.x, []).append(r.value)
    return {x: float(np.mean(v)) for x, v in sorted(acc.items())}


def seeds_of(rows) -> list[int]:
    return sorted({r.seed for r in rows})


def check_ref_ablation(rows, tol: float = 0.05) -> list[CheckResult]:
    notes, ok_all = [], True
    for s in seeds_of(rows):
        val, acc, std = series(rows, "val_nll", s), series(rows, "accepted", s), series(rows, "default_std", s)
        n_acc = int(next(iter(series(rows, "n_accepted", s).values())))
        first_two = acc.get(1) == 1 and acc.get(2) == 1 and val[0] > val[1] > val[2]
        declines = n_acc <= 3
        kept = [std[k] for k in sorted(std) if k <= n_acc]
        monotone = all(b <= a for a, b in zip(kept, kept[1:]))
        tail = [std[k] for k in sorted(std) if k >= 3]
        flat = all(abs(v - std[3]) <= tol * std[3] for v in tail) if 3 in std else False
        ok = first_two and declines and monotone and flat
        ok_all &= ok
        notes.append(f"seed {s}: refs={n_acc} L={[round(val[k], 2) for k in sorted(val)]} "
                     f"std={[round(v, 4) for v in std.values()]}{'' if ok else ' <-'}")
    return [CheckResult("C1 reference ablation", ok_all, "; ".join(notes))]


def check_distractor_sweep(rows, rel: float = 0.10, max_inversions: int = 1) -> list[CheckResult]:
    sp = series(rows, "spare_ll_stack")
    vals = np.array(list(sp.values()))
    spread = float((vals.max() - vals.min()) / abs(vals.mean()))
    inv = 0
    for s in seeds_of(rows):
        b = list(series(rows, "baseline_ll_stack", s).values())
        inv += sum(1 for a, c in zip(b, b[1:]) if c >= a)
    base = series(rows, "baseline_ll_stack")
    ok = spread < rel and inv <= max_inversions
    detail = (f"SPARE stack ll {[round(v, 2) for v in sp.values()]} spread {spread:.3f} (< {rel}); baseline "
              f"{[round(v, 2) for v in base.values()]} inversions {inv} (<= {max_inversions})")
    return [CheckResult("C2 distractor insensitivity", ok, detail)]


def check_sample_efficiency(rows, spare_n: int = 1000, base_n: int = 5000) -> list[CheckResult]:
    wins, notes = 0, []
    for s in seeds_of(rows):
        a = series(rows, "spare_ll_stack", s)[spare_n]
        b = series(rows, "baseline_ll_stack", s)[base_n]
        wins += a > b
        notes.append(f"seed {s}: {a:.2f} vs {b:.2f}")
    ok = wins >= 2
    return [CheckResult("C3 sample efficiency", ok, f"SPARE@{spare_n} > baseline@{base_n} in {wins} seeds; "
                        + "; ".join(notes))]


def check_em_separation(rows, first: int = 3, final: int = 10, level: float = 0.85) -> list[CheckResult]:
    ok_all, notes = True, []
    metrics = sorted({r.metric for r in rows if r.metric.startswith("membership_h")})
    for s in seeds_of(rows):
        for m in metrics:
            traj = series(rows, m, s)
            head = [traj[i] for i in range(first + 1)]
            ok = all(b > a for a, b in zip(head, head[1:])) and traj.get(final, -1) > level
            ok_all &= ok
            notes.append(f"seed {s} {m[11:]}: {[round(v, 3) for v in traj.values()]}{'' if ok else ' <-'}")
    return [CheckResult("C4 EM separation", ok_all, "; ".join(notes))]


def _diag(rows, key: str, seed: int | None = None) -> list[float]:
    heights = sorted({r.x for r in rows})
    return [series(rows, f"{key}_c{i}", seed)[h] for i, h in enumerate(heights)]


def check_init_tables(rows, level: float = 0.70) -> list[CheckResult]:
    disc = _diag(rows, "discrete_s1")
    out = [CheckResult("C5a discrete diagonals", min(disc) >= level,
                       f"seed-mean diagonal {[round(v, 3) for v in disc]} (>= {level})")]
    sq_wins, sc_wins = 0, 0
    for s in seeds_of(rows):
        sq, inv = _diag(rows, "inv-sq-dist_s1", s), _diag(rows, "inv-dist_s1", s)
        sq5 = _diag(rows, "inv-sq-dist_s5", s)
        sq_wins += all(a > b for a, b in zip(sq, inv))
        sc_wins += all(a > b for a, b in zip(sq5, sq))
    out.append(CheckResult("C5b inv-sq-dist beats inv-dist", sq_wins >= 2, f"{sq_wins} of {len(seeds_of(rows))} seeds"))
    sq, sq5 = _diag(rows, "inv-sq-dist_s1"), _diag(rows, "inv-sq-dist_s5")
    out.append(CheckResult("C5c loss feature x5 raises diagonals", sc_wins >= 2,
                           f"{sc_wins} of {len(seeds_of(rows))} seeds; seed-mean {[round(v, 3) for v in sq]} -> "
                           f"{[round(v, 3) for v in sq5]}"))
    return out


def check_ordering_study(rows, min_extras: int = 2) -> list[CheckResult]:
    s = {o: series(rows, f"baseline_ll_stack_{o}") for o in ("none", "xtheny", "stack")}
    ok, notes = True, []
    for e in sorted(s["none"]):
        if e < min_extras:
            continue
        good = s["stack"][e] >= s["xtheny"][e] >= s["none"][e]
        ok &= good
        notes.append(f"{int(e)}: {s['stack'][e]:.1f} >= {s['xtheny'][e]:.1f} >= {s['none'][e]:.1f}"
                     f"{'' if good else ' <-'}")
    return [CheckResult("C6 ordering study", ok, "; ".join(notes))]


CHECKS: dict[str, Callable] = {
    "ref-ablation": check_ref_ablation,
    "distractor-sweep": check_distractor_sweep,
    "sample-efficiency": check_sample_efficiency,
    "em-separation": check_em_separation,
    "ordering-study": check_ordering_study,
    "init-tables": check_init_tables,
}


def check_experiment(name: str, rows) -> list[CheckResult]:
    rows = [r for r in rows if r.experiment == name]
    if not rows:
        raise ValueError(f"no rows for experiment {name!r}")
    try:
        return CHECKS[name](rows)
    except (KeyError, StopIteration, IndexError) as exc:
        return [CheckResult(name, False, f"rows lack a point the check needs ({exc!r})")]


def table_summary(rows, key: str) -> str:
    """Height x cluster table with across-seed standard deviations."""
    heights = sorted({r.x for r in rows})
    lines = [f"{key}: rows = stack height, columns = matched cluster"]
    for h in heights:
        cells = []
        for c in range(len(heights)):
            v = [r.value for r in rows if r.metric == f"{key}_c{c}" and r.x == h]
            cells.append(f"{np.mean(v):.3f} ({np.std(v):.3f})")
        lines.append(f"  {int(h)}: " + "  ".join(cells))
    return "\n".join(lines)
