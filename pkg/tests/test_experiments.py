import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spare_lab.experiments import (
    CSV_HEADER,
    EXPERIMENTS,
    ExperimentConfig,
    MetricsRow,
    check_distractor_sweep,
    check_em_separation,
    check_experiment,
    check_init_tables,
    check_ordering_study,
    check_ref_ablation,
    check_sample_efficiency,
    cluster_table,
    export_metrics,
    format_config,
    load_metrics,
    make_config,
    oracle_membership,
    parse_overrides,
    read_config_file,
    rows_from_csv,
    rows_from_json,
    rows_to_csv,
    rows_to_json,
    run_experiment,
)

CONF = Path(__file__).resolve().parents[1] / "configs" / "defaults.conf"


def R(metric, x, value, seed=1, exp="ref-ablation", sweep="refs"):
    return MetricsRow(exp, seed, sweep, float(x), metric, float(value))


def test_config_overrides():
    cfg = make_config("distractor-sweep", parse_overrides(["seeds=4,5", "n_train = 40", "floor=1e-3"]))
    assert cfg.seeds == (4, 5) and cfg.n_train == 40 and cfg.floor == 1e-3 and cfg.name == "distractor-sweep"
    assert make_config("init-tables", {"table_scales": "1,2.5"}).table_scales == (1.0, 2.5)
    for bad in (["n_trian=3"], ["seeds"]):
        with pytest.raises(ValueError):
            make_config("ref-ablation", parse_overrides(bad))
    with pytest.raises(ValueError):
        make_config("no-such-experiment")
    with pytest.raises(ValueError):
        make_config("ref-ablation", {"val_frac": "1.5"})


def test_defaults_file_matches_config(tmp_path):
    from_file = read_config_file(CONF)
    assert set(from_file) == set(asdict(ExperimentConfig()))
    assert make_config("ref-ablation", {k: v for k, v in from_file.items() if k != "name"}) == ExperimentConfig()
    out = tmp_path / "c.conf"
    out.write_text(format_config(make_config("em-separation", {"k": "4"})))
    assert make_config("em-separation", {k: v for k, v in read_config_file(out).items() if k != "name"}).k == 4


metric_names = st.sampled_from(["val_nll", "spare_ll_stack", "membership_h2"])
finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.lists(st.builds(MetricsRow, st.sampled_from(EXPERIMENTS), st.integers(0, 9), st.just("refs"),
                          finite, metric_names, finite), max_size=8))
def test_metrics_roundtrip_is_exact(rows):
    assert rows_from_csv(rows_to_csv(rows)) == rows
    assert rows_from_json(rows_to_json(rows)) == rows


def test_metrics_files(tmp_path):
    rows = [R("val_nll", 0, -1.0 / 3), R("val_nll", 1, math.pi)]
    for name in ("m.csv", "m.json"):
        export_metrics(rows, tmp_path / name)
        assert load_metrics(tmp_path / name) == rows
    export_metrics([], tmp_path / "empty.csv")
    lines = (tmp_path / "empty.csv").read_text().splitlines()
    assert lines[0].startswith("#") and tuple(lines[1].split(",")) == CSV_HEADER and len(lines) == 2
    with pytest.raises(ValueError):
        R("val_nll", 0, float("nan"))
    with pytest.raises(ValueError):
        rows_from_csv("a,b\n")


def test_oracle_membership():
    z, levels = oracle_membership([4, 2, 3, 4], 0.7, 3)
    assert levels == [2, 3, 4]
    assert np.allclose(z, [[0.15, 0.15, 0.7], [0.7, 0.15, 0.15], [0.15, 0.7, 0.15], [0.15, 0.15, 0.7]])
    with pytest.raises(ValueError):
        oracle_membership([1, 2, 3], 0.7, 2)


def test_cluster_table_recovers_a_permutation():
    heights = np.array([2, 2, 3, 3, 4, 4])
    labels = np.array([1, 1, 2, 2, 0, 0])
    z = np.eye(3)[labels] * 0.8 + 0.2 / 3
    tab, order = cluster_table(z, heights, [2, 3, 4], labels)
    assert order.tolist() == [1, 2, 0]
    assert np.allclose(np.diag(tab), 0.8 + 0.2 / 3)


def _ablation_rows(seed, losses, n_acc, std):
    rows = [R("n_accepted", 0, n_acc, seed)]
    for k, (l, s) in enumerate(zip(losses, std)):
        rows += [R("val_nll", k, l, seed), R("default_std", k, s, seed), R("accepted", k, int(0 < k <= n_acc), seed)]
    return rows


def test_check_ref_ablation():
    good = _ablation_rows(1, [-5, -6, -7, -7, -7], 2, [0.04, 0.03, 0.01, 0.01, 0.01])
    assert check_ref_ablation(good)[0].passed
    four = _ablation_rows(1, [-5, -6, -7, -7.1, -7.2], 4, [0.04, 0.03, 0.01, 0.01, 0.01])
    assert not check_ref_ablation(four)[0].passed
    drifting = _ablation_rows(1, [-5, -6, -7, -7, -7], 2, [0.04, 0.03, 0.01, 0.02, 0.01])
    assert not check_ref_ablation(drifting)[0].passed


def _sweep_rows(spare, base, exp="distractor-sweep"):
    rows = []
    for s in (1, 2, 3):
        for e, a, b in zip((0, 2, 4, 6), spare, base):
            rows += [R("spare_ll_stack", e, a, s, exp, "extras"), R("baseline_ll_stack", e, b, s, exp, "extras")]
    return rows


def test_check_distractor_sweep():
    assert check_distractor_sweep(_sweep_rows([60, 61, 60, 59], [60, 50, 40, 30]))[0].passed
    assert not check_distractor_sweep(_sweep_rows([60, 61, 60, 50], [60, 50, 40, 30]))[0].passed
    assert not check_distractor_sweep(_sweep_rows([60, 61, 60, 59], [60, 50, 55, 30]))[0].passed


def test_check_sample_efficiency():
    rows = []
    for s, (a, b) in zip((1, 2, 3), [(5, 4), (5, 6), (5, 4)]):
        rows += [R("spare_ll_stack", 1000, a, s, "sample-efficiency"), R("baseline_ll_stack", 5000, b, s, "sample-efficiency")]
    assert check_sample_efficiency(rows)[0].passed
    # a missing sweep point is a failed check, not a crash
    res = check_experiment("sample-efficiency", [r for r in rows if r.x != 5000])
    assert not res[0].passed and "lack" in res[0].detail


def test_check_em_separation():
    up = [0.7, 0.75, 0.8, 0.85, 0.86, 0.87, 0.88, 0.88, 0.89, 0.9, 0.9]
    rows = [R("membership_h2", i, v, 1, "em-separation", "iteration") for i, v in enumerate(up)]
    assert check_em_separation(rows)[0].passed
    flat = list(up)
    flat[2] = flat[1]
    rows = [R("membership_h2", i, v, 1, "em-separation", "iteration") for i, v in enumerate(flat)]
    assert not check_em_separation(rows)[0].passed


def test_check_init_tables():
    rows = []
    for s in (1, 2, 3):
        for key, d in (("discrete_s1", 0.8), ("inv-dist_s1", 0.4), ("inv-sq-dist_s1", 0.5), ("inv-sq-dist_s5", 0.6)):
            for i, h in enumerate((2, 3, 4)):
                for c in range(3):
                    rows.append(R(f"{key}_c{c}", h, d if c == i else (1 - d) / 2, s, "init-tables", "height"))
    assert [c.passed for c in check_init_tables(rows)] == [True, True, True]


def test_check_ordering_study():
    rows = []
    for e in (0, 2, 4):
        for o, v in (("none", 1.0), ("xtheny", 2.0), ("stack", 3.0 if e else 0.0)):
            rows.append(R(f"baseline_ll_stack_{o}", e, v, 1, "ordering-study", "extras"))
    assert check_ordering_study(rows)[0].passed          # extras 0 is not judged
    rows.append(R("baseline_ll_stack_none", 4, 9.0, 2, "ordering-study", "extras"))
    assert not check_ordering_study(rows)[0].passed


def test_rows_do_not_depend_on_worker_count(monkeypatch):
    cfg = make_config("ordering-study", parse_overrides(
        ["seeds=1,2", "extras=0,1", "n_train=30", "n_test=5", "baseline_epochs=4"]))
    monkeypatch.setenv("SPARE_LAB_THREADS", "1")
    one = run_experiment(cfg)
    monkeypatch.setenv("SPARE_LAB_THREADS", "2")
    two = run_experiment(cfg)
    assert one == two and len(one) == 2 * 2 * 3 * 2
