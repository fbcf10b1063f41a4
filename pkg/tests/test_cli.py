import csv
import json

import pytest

from spare_lab.cli import main
from spare_lab.relational import read_dataset
from spare_lab.blocks import DOMAIN

FAST = ["--epochs", "8", "--seed", "1"]


def _out(capsys):
    return capsys.readouterr().out


def test_end_to_end(tmp_path, capsys):
    train, test = tmp_path / "train.jsonl", tmp_path / "test.jsonl"
    assert main(["gen-data", "--count", "60", "--seed", "3", "--extras", "1", "--out", str(train)]) == 0
    assert main(["gen-data", "--count", "10", "--seed", "4", "--extras", "1", "--out", str(test)]) == 0
    assert len(read_dataset(train, DOMAIN)) == 60

    single, log = tmp_path / "single.json", tmp_path / "shells.csv"
    assert main(["train-single", "--data", str(train), "--max-refs", "1", "--log", str(log), "--out", str(single)]
                + FAST) == 0
    assert _out(capsys).startswith("selected [")
    with open(log) as f:
        assert next(csv.reader(f)) == ["shell", "val_nll"]

    base = tmp_path / "base.json"
    assert main(["train-baseline", "--data", str(train), "--ordering", "oracleStack", "--out", str(base)] + FAST) == 0

    for model in (single, base):
        for scope in ("all", "stack"):
            assert main(["eval", "--model", str(model), "--data", str(test), "--scope", scope]) == 0
            res = json.loads(_out(capsys))
            assert res["n"] == 10 and res["scope"] == scope


def test_train_em_writes_trace(tmp_path, capsys):
    data, model, trace = tmp_path / "d.jsonl", tmp_path / "em.json", tmp_path / "trace.csv"
    assert main(["gen-data", "--count", "60", "--seed", "5", "--mix", "2:1,3:1", "--out", str(data)]) == 0
    assert main(["train-em", "--data", str(data), "--K", "2", "--kappa", "2", "--iters", "1", "--max-refs", "1",
                 "--trace", str(trace), "--out", str(model)] + FAST) == 0
    assert _out(capsys).count("rule ") == 2
    with open(trace) as f:
        rows = list(csv.DictReader(f))
    assert [r["iteration"] for r in rows] == ["0", "0", "1", "1"] and "membership_h3" in rows[0]
    assert main(["eval", "--model", str(model), "--data", str(data)]) == 0


def test_experiment_run_and_check(tmp_path, capsys):
    out = tmp_path / "o.json"
    args = ["experiment", "run", "ordering-study", "--set", "seeds=1", "--set", "extras=2", "--set", "n_train=30",
            "--set", "n_test=5", "--set", "baseline_epochs=4", "--format", "json", "--out", str(out)]
    assert main(args) == 0
    code = main(["experiment", "check", "ordering-study", "--metrics", str(out)])
    assert code in (0, 1) and "C6 ordering study" in _out(capsys)


def test_defaults_and_errors(tmp_path, capsys):
    assert main(["experiment", "defaults", "init-tables"]) == 0
    assert "table_scales = 1.0,5.0" in _out(capsys)
    assert main(["eval", "--model", str(tmp_path / "missing.json"), "--data", "x"]) == 2
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"kind": "mystery"}))
    assert main(["eval", "--model", str(bad), "--data", "x"]) == 2
    assert main(["experiment", "run", "ref-ablation", "--set", "nope=1"]) == 2
    with pytest.raises(SystemExit):
        main(["experiment", "run", "not-an-experiment"])
