"""Command-line entry point: data generation, training, evaluation, experiments."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import experiments as ex
from .baseline import ORDERINGS, ALIASES, BaselineModel, eval_baseline, train_baseline
from .blocks import DOMAIN, SceneConfig, generate_dataset, parse_mix, stack_height_of
from .em import INIT_MODES, EmConfig, EmResult, run_em
from .predictor import DEFAULT_FLOOR, TrainConfig
from .relational import read_dataset, refs_str, write_dataset
from .rules import SpareModel, sample_logliks, train_single

log = logging.getLogger("spare_lab")


def _train_cfg(args, epochs: int) -> TrainConfig:
    return TrainConfig(epochs=args.epochs or epochs, floor=args.floor, seed=args.seed)


def _write_json(path, d) -> None:
    with open(path, "w") as f:
        json.dump(d, f, sort_keys=True)


def cmd_gen_data(args) -> int:
    cfg = SceneConfig(stack_height=args.stack_height, n_extra=args.extras, noise_std=args.noise,
                      target=args.target, seed=args.seed)
    exps = generate_dataset(cfg, args.count, parse_mix(args.mix) if args.mix else None)
    write_dataset(args.out, exps)
    log.info("wrote %d experiences to %s", len(exps), args.out)
    return 0


def cmd_train_single(args) -> int:
    exps = read_dataset(args.data, DOMAIN)
    model, res = train_single(DOMAIN, exps, args.template, args.max_refs, _train_cfg(args, 100),
                              args.val_frac, args.seed)
    _write_json(args.out, model.to_dict())
    print(f"selected {refs_str(res.gamma)}; validation NLL {' > '.join(f'{l:.3f}' for l in res.losses)}")
    if args.log:
        with open(args.log, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("shell", "val_nll"))
            for shell, loss in res.explored:
                w.writerow((refs_str(shell), repr(float(loss))))
    return 0


def write_em_trace(path, res: EmResult, heights: np.ndarray) -> None:
    levels = sorted(set(heights.tolist()))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "rule", "top_shells", "top_weights"] + [f"membership_h{h}" for h in levels])
        for snap in res.trace:
            tab = ex.membership_by_height(snap["z"], heights, levels)
            for j, (shells, weights) in enumerate(zip(snap["top_shells"], snap["top_weights"])):
                w.writerow([snap["iteration"], j, ";".join(shells), ";".join(repr(float(v)) for v in weights)]
                           + [repr(float(v)) for v in tab[:, j]])


def cmd_train_em(args) -> int:
    exps = read_dataset(args.data, DOMAIN)
    cfg = EmConfig(k=args.K, kappa=args.kappa, iters=args.iters, eps=args.eps, max_refs=args.max_refs,
                   init=args.init, loglik_scale=args.loglik_scale, val_frac=args.val_frac, z_tol=args.z_tol,
                   seed=args.seed)
    res = run_em(DOMAIN, exps, args.template, cfg, _train_cfg(args, 100))
    _write_json(args.out, res.to_dict())
    if args.trace:
        write_em_trace(args.trace, res, np.array([stack_height_of(e) for e in exps]))
    for j, shells in enumerate(res.trace[-1]["top_shells"]):
        print(f"rule {j}: {', '.join(shells)}")
    return 0


def cmd_train_baseline(args) -> int:
    exps = read_dataset(args.data, DOMAIN)
    model = train_baseline(exps, args.ordering, _train_cfg(args, 300))
    _write_json(args.out, model.to_dict())
    return 0


def load_model(path):
    with open(path) as f:
        d = json.load(f)
    kind = d.get("kind")
    if kind == "spare-model":
        return SpareModel.from_dict(d)
    if kind == "em-model":
        return SpareModel.from_dict(d["spare_model"])
    if kind == "baseline-model":
        return BaselineModel.from_dict(d)
    raise ValueError(f"{path}: unknown model kind {kind!r}")


def cmd_eval(args) -> int:
    model = load_model(args.model)
    exps = read_dataset(args.data, DOMAIN)
    scope = ex.stack_scope if args.scope == "stack" else None
    if isinstance(model, BaselineModel):
        ll = eval_baseline(model, exps, scope)
    else:
        ll = sample_logliks(DOMAIN, model, exps, scope)
    print(json.dumps({"scope": args.scope, "n": len(ll), "mean_loglik": float(ll.mean()),
                      "std_loglik": float(ll.std())}))
    return 0


def _experiment_config(args) -> ex.ExperimentConfig:
    values = ex.read_config_file(args.config) if args.config else {}
    values.update(ex.parse_overrides(args.set or []))
    return ex.make_config(args.name, values)


def _report(name, rows) -> int:
    results = ex.check_experiment(name, rows)
    for r in results:
        print(r.line())
    if name == "init-tables":
        for key in sorted({r.metric.rsplit("_c", 1)[0] for r in rows}):
            print(ex.table_summary(rows, key))
    return 0 if all(r.passed for r in results) else 1


def cmd_experiment(args) -> int:
    if args.action == "defaults":
        sys.stdout.write(ex.format_config(ex.make_config(args.name)))
        return 0
    if args.action == "check" and args.metrics:
        return _report(args.name, ex.load_metrics(args.metrics))
    cfg = _experiment_config(args)
    rows = ex.run_experiment(cfg)
    out = args.out
    if not out:
        os.makedirs(cfg.out_dir, exist_ok=True)
        out = os.path.join(cfg.out_dir, f"{args.name}.{args.format}")
    ex.export_metrics(rows, out, args.format)
    log.info("wrote %d rows to %s", len(rows), out)
    if args.action == "check" or args.check:
        return _report(args.name, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spare-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def training(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--epochs", type=int, default=0, help="0 keeps the command's default")
        sp.add_argument("--floor", type=float, default=DEFAULT_FLOOR)
        sp.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="generate a pushing dataset (JSONL)")
    g.add_argument("--stack-height", type=int, default=3)
    g.add_argument("--extras", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mix", default="", help='stack-height mix, e.g. "2:0.15,3:0.15,4:0.70"')
    g.add_argument("--target", choices=("bottom", "any"), default="bottom")
    g.add_argument("--noise", type=float, default=SceneConfig.noise_std)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-single", help="greedy reference selection for one rule")
    training(t)
    t.add_argument("--template", default="push")
    t.add_argument("--max-refs", type=int, default=3)
    t.add_argument("--val-frac", type=float, default=0.15)
    t.add_argument("--log", help="CSV of every explored shell and its validation NLL")
    t.set_defaults(fn=cmd_train_single)

    e = sub.add_parser("train-em", help="EM over K mixture rules")
    training(e)
    e.add_argument("--template", default="push")
    e.add_argument("--K", type=int, default=3)
    e.add_argument("--kappa", type=int, default=3)
    e.add_argument("--iters", type=int, default=10)
    e.add_argument("--eps", type=float, default=0.05)
    e.add_argument("--max-refs", type=int, default=3)
    e.add_argument("--init", choices=INIT_MODES, default="inv-sq-dist")
    e.add_argument("--loglik-scale", type=float, default=1.0)
    e.add_argument("--val-frac", type=float, default=0.15)
    e.add_argument("--z-tol", type=float, default=0.0)
    e.add_argument("--trace", help="per-iteration CSV")
    e.set_defaults(fn=cmd_train_em)

    b = sub.add_parser("train-baseline", help="monolithic predictor over the ordered state")
    training(b)
    b.add_argument("--ordering", choices=ORDERINGS + tuple(ALIASES), default="xtheny")
    b.set_defaults(fn=cmd_train_baseline)

    v = sub.add_parser("eval", help="mean per-sample test log-likelihood")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--scope", choices=("all", "stack"), default="all")
    v.set_defaults(fn=cmd_eval)

    x = sub.add_parser("experiment", help="run or check a desk-scale experiment")
    x.add_argument("action", choices=("run", "check", "defaults"))
    x.add_argument("name", choices=ex.EXPERIMENTS)
    x.add_argument("--config", help="key = value file (see configs/defaults.conf)")
    x.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    x.add_argument("--out", help="metrics file (default <out_dir>/<name>.<format>)")
    x.add_argument("--format", choices=("csv", "json"), default="csv")
    x.add_argument("--metrics", help="check: read this metrics file instead of running")
    x.add_argument("--check", action="store_true", help="run: exit 1 if an acceptance threshold fails")
    x.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
