import csv
import json

import numpy as np
import pytest

from multires.cli import attention_rows, main, save_run
from multires.data import SynthConfig, generate_synthetic
from multires.trainer import TrainConfig, train

TINY = {"synth": {"coarse_side": 4, "n_coarse_labeled": 16, "fine_dim": 4, "coarse_dim": 5}, "epochs": 15, "lambda": "1"}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def data(tmp_path, cfg):
    out = tmp_path / "data"
    assert main(["generate", "--config", cfg, "--out", str(out), "--seeds", "1"]) == 0
    return out


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_default_layout(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--out", str(a)]) == 0
    assert main(["generate", "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["coarse1-labeled.csv", "coarse1-unlabeled.csv", "fine-labeled.csv", "fine-test.csv", "fine-unlabeled.csv"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    assert len(_read(a / "fine-unlabeled.csv")) == 900
    assert len(_read(a / "fine-test.csv")) == 900
    assert len(_read(a / "coarse1-unlabeled.csv")) == 100


def test_train_writes_metrics(tmp_path, data, cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data-dir", str(data), "--out", str(out), "--method", "onlyfine"]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["runs"][0]["method"] == "OnlyFine"
    assert (out / "model-0.txt").exists()


def test_usage_and_data_errors(tmp_path, data, capsys):
    assert main(["train", "--data-dir", str(data), "--out", str(tmp_path / "r"), "--method", "bagging"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--model", "cnn"])
    assert exc.value.code == 2
    (data / "fine-unlabeled.csv").unlink()
    capsys.readouterr()
    assert main(["train", "--data-dir", str(data), "--out", str(tmp_path / "r"), "--method", "onlyfine"]) == 1
    assert "fine-unlabeled.csv" in capsys.readouterr().err


def test_flags_override_config(tmp_path, data, cfg):
    out = tmp_path / "run"
    args = ["train", "--config", cfg, "--data-dir", str(data), "--out", str(out), "--method", "onlyfine"]
    assert main([*args, "--epochs", "7"]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["runs"][0]["epochs"] == 7
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epoch": 3}))
    assert main(["train", "--config", str(bad), "--out", str(out)]) == 2


def test_compare_tables(tmp_path, data, cfg):
    out = tmp_path / "cmp"
    argv = ["compare", "--config", cfg, "--data-dir", str(data), "--out", str(out), "--method", "OnlyFine", "--seeds", "0"]
    assert main(argv) == 0
    rows = _read(out / "compare.csv")
    assert len(rows) == 1 and float(rows[0]["std"]) == 0.0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(argv) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first

    out2 = tmp_path / "cmp2"
    assert main(["compare", "--config", cfg, "--out", str(out2), "--seeds", "0,1", "--method", "onlyfine,propagate,multiresmil"]) == 0
    rows = _read(out2 / "compare.csv")
    assert len(rows) == 3
    means = [float(r["mean"]) for r in rows]
    assert means == sorted(means, reverse=True)
    text = (out2 / "compare.txt").read_text().splitlines()[1:]
    for line, row in zip(text, rows):
        assert line.split() == [row["method"], row["mean"], row["std"], row["n"]]
    assert len(json.loads((out2 / "metrics.json").read_text())["runs"]) == 6


def test_sweep_labels(tmp_path, data, cfg):
    out = tmp_path / "sweep"
    assert main(["sweep-labels", "--config", cfg, "--data-dir", str(data), "--out", str(out), "--method", "onlyfine", "--seeds", "2", "--budgets", "5,10,20"]) == 0
    rows = _read(out / "sweep.csv")
    assert [r["budget"] for r in rows] == ["5", "10", "20"]
    cmp = tmp_path / "cmp"
    assert main(["compare", "--config", cfg, "--data-dir", str(data), "--out", str(cmp), "--method", "onlyfine", "--seeds", "2"]) == 0
    assert _read(cmp / "compare.csv")[0]["mean"] == rows[-1]["mean"]
    assert main(["sweep-labels", "--config", cfg, "--data-dir", str(data), "--out", str(out), "--method", "onlyfine", "--budgets", "21"]) == 1


def test_model_complexity(tmp_path, cfg):
    out = tmp_path / "mc"
    assert main(["model-complexity", "--config", cfg, "--out", str(out), "--seeds", "0"]) == 0
    rows = _read(out / "complexity.csv")
    assert [(r["model"], r["method"]) for r in rows] == [
        ("logreg", "OnlyFine"), ("logreg", "MultiResAttention"), ("mlp1", "OnlyFine"), ("mlp1", "MultiResAttention"),
    ]


def test_export_attention(tmp_path, data, cfg):
    run, out = tmp_path / "run", tmp_path / "att.csv"
    assert main(["train", "--config", cfg, "--data-dir", str(data), "--out", str(run), "--method", "multiresattention"]) == 0
    assert main(["export-attention", "--data-dir", str(data), "--checkpoint", str(run), "--out", str(out)]) == 0
    rows = _read(out)
    groups = {}
    for r in rows:
        groups.setdefault(r["coarse_id"], []).append(float(r["attention_weight"]))
    assert len(groups) == 16
    for w in groups.values():
        assert len(w) == 9
        assert abs(sum(w) - 1) <= 1e-9
    assert main(["train", "--config", cfg, "--data-dir", str(data), "--out", str(tmp_path / "of"), "--method", "onlyfine"]) == 0
    assert main(["export-attention", "--data-dir", str(data), "--checkpoint", str(tmp_path / "of"), "--out", str(out)]) == 1


def test_attention_favours_true_positives(tmp_path):
    ds = generate_synthetic(SynthConfig(), 0)
    res = train(ds, TrainConfig(method="MultiResAttention", model="mlp1", lambdas=(10.0,)))
    save_run(res, tmp_path)
    rows = attention_rows(tmp_path, ds)[1]
    fine_truth = dict(zip(ds.fine.unlabeled.ids.tolist(), ds.fine.unlabeled.truth.tolist()))
    coarse_truth = dict(zip(ds.coarse[0].unlabeled.ids.tolist(), ds.coarse[0].unlabeled.truth.tolist()))
    pos = [r[-1] for r in rows if coarse_truth[r[0]] == 1 and fine_truth[r[1]] == 1]
    neg = [r[-1] for r in rows if coarse_truth[r[0]] == 1 and fine_truth[r[1]] == 0]
    assert np.mean(pos) > np.mean(neg)
