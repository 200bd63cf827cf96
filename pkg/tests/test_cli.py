import csv
import json

import pytest
import torch

from ein.cli import DEFAULTS, main, parse_classes, UsageError
from ein.ingest import read_ndtree
from ein.training import load_checkpoint

TINY = ["--backbone", "gcn", "--hidden", "8", "--layers", "1", "--epochs", "2", "--batch-size", "16"]


@pytest.fixture
def synth(tmp_path):
    out = tmp_path / "s.ndtree"
    assert main(["simulate", "--count", "40", "--seed", "1", "--dim", "8", "--out", str(out)]) == 0
    return out


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.ndtree", tmp_path / "b.ndtree"
    for p in (a, b):
        assert main(["simulate", "--count", "4", "--seed", "1", "--dim", "4", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    records, meta = read_ndtree(a)
    assert len(records) == 4 and all(r.labels is not None or r.tree.n == 1 for r in records)
    assert meta["version"] and meta["config"]["seed"] == 1 and meta["command"] == "simulate"


def test_train_eval_plot_pipeline(tmp_path, synth):
    ckpt = tmp_path / "m.pt"
    assert main(["train", "--data", str(synth), "--lambda", "0", "--out", str(ckpt), *TINY]) == 0
    _, cfg, blob = load_checkpoint(ckpt)
    assert cfg.lam == 0.0 and blob["run_config"]["config"]["train"]["lambda"] == 0.0
    log = [json.loads(x) for x in (tmp_path / "m.pt.log.jsonl").read_text().splitlines()]
    assert "_meta" in log[0] and [e["epoch"] for e in log[1:]] == [1, 2]
    assert {"L_r", "L_p", "val_acc", "val_auc", "val_f1"} <= set(log[1])

    metrics = tmp_path / "m.csv"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(synth), "--by-depth", "--out", str(metrics)]) == 0
    rows = list(csv.DictReader(metrics.open()))
    assert [r["bucket"] for r in rows] == ["all", "D1", "D2to5", "Dgt5", "degenerate"]
    assert sum(int(r["support"]) for r in rows[1:]) == int(rows[0]["support"]) == 8
    side = json.loads((tmp_path / "m.csv.meta.json").read_text())
    assert side["version"] and side["checkpoints"] == [str(ckpt)]

    records, _ = read_ndtree(synth)
    eid = next(r.tree.event_id for r in records if r.tree.n > 3)
    assert main(["plot", "--ckpt", str(ckpt), "--data", str(synth), "--event-id", eid, "--out", str(tmp_path / "case")]) == 0
    assert (tmp_path / "case.png").exists() and (tmp_path / "case.csv").exists()
    assert main(["plot", "--ckpt", str(ckpt), "--data", str(synth), "--event-id", "nope", "--out", str(tmp_path / "x")]) == 3
    assert not (tmp_path / "x.csv").exists()


def test_multi_run_eval_aggregates(tmp_path, synth):
    ckpt = tmp_path / "m.pt"
    assert main(["train", "--data", str(synth), "--runs", "2", "--out", str(ckpt), *TINY]) == 0
    runs = [tmp_path / "m.run0.pt", tmp_path / "m.run1.pt"]
    assert [load_checkpoint(p)[1].seed for p in runs] == [0, 1]
    out = tmp_path / "agg.csv"
    args = ["eval", "--data", str(synth), "--out", str(out)]
    for p in runs:
        args += ["--ckpt", str(p)]
    assert main(args) == 0
    summary = list(csv.DictReader((tmp_path / "agg.summary.csv").open()))
    assert summary[0]["bucket"] == "all" and summary[0]["runs"] == "2"


def test_ingest_label_train_from_native(tmp_path):
    raw = tmp_path / "raw.ndtree"
    lines = []
    for i in range(20):
        nodes = [{"id": 0, "parent": None, "text": "breaking news"}]
        nodes += [{"id": k, "parent": k - 1, "text": "fake" if (i + k) % 3 == 0 else "ok"} for k in range(1, 4)]
        lines.append(json.dumps({"id": f"e{i}", "label": i % 2, "nodes": nodes}))
    raw.write_text("\n".join(lines) + "\n")
    trees, labeled, cache = tmp_path / "t.ndtree", tmp_path / "l.ndtree", tmp_path / "cache.jsonl"
    assert main(["ingest", "--input", str(raw), "--format", "native", "--out", str(trees)]) == 0
    assert main(["label", "--trees", str(trees), "--provider", "mock", "--cache", str(cache), "--out", str(labeled)]) == 0
    records, meta = read_ndtree(labeled)
    assert meta["command"] == "label" and all(r.labels is not None for r in records)
    assert cache.exists()
    cfg = tmp_path / "run.toml"
    cfg.write_text('[data]\ndim = 16\n[train]\nepochs = 1\n')
    assert main(["train", "--config", str(cfg), "--data", str(labeled), "--out", str(tmp_path / "m.pt"), "--backbone", "gcn"]) == 0
    model, tcfg, blob = load_checkpoint(tmp_path / "m.pt")
    assert model.in_dim == 16 and tcfg.epochs == 1 and tcfg.backbone == "gcn"
    assert main(["eval", "--ckpt", str(tmp_path / "m.pt"), "--data", str(labeled), "--out", str(tmp_path / "e.csv")]) == 0


def test_sweep_report(tmp_path, synth):
    grid = tmp_path / "grid.toml"
    grid.write_text('[sweep]\ninit = [0.0, 0.5, 1.0, "random"]\nlambda = [0.0, 1.0]\nruns = 1\n')
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--data", str(synth), "--grid", str(grid), "--out", str(out), *TINY]) == 0
    rows = list(csv.DictReader(out.open()))
    init = [r for r in rows if r["param"] == "alpha0,beta0"]
    assert [r["value"] for r in init] == ["0.0", "0.5", "1.0", "random"]
    assert len(rows) == 6 and all(0 <= float(r["acc_mean"]) <= 1 for r in rows)


def test_exit_codes_and_partial_outputs(tmp_path, synth):
    assert main([]) == 2
    assert main(["train", "--data", str(synth)]) == 2
    assert main(["train", "--data", str(synth), "--alpha0", "2", "--out", "x"]) == 2
    bad_cfg = tmp_path / "bad.toml"
    bad_cfg.write_text("[train]\nnot_a_key = 1\n")
    assert main(["simulate", "--config", str(bad_cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--classes", "0.9:0.9", "--out", str(tmp_path / "o")]) == 2
    assert main(["ingest", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    garbage = tmp_path / "g.ndtree"
    garbage.write_text("{not json\n")
    assert main(["train", "--data", str(garbage), "--out", str(tmp_path / "m.pt")]) == 3
    assert not (tmp_path / "m.pt").exists()

    cfg = tmp_path / "p.toml"
    cfg.write_text("[labeler]\nmax_attempts = 1\n")
    out = tmp_path / "l.ndtree"
    rc = main(["label", "--config", str(cfg), "--trees", str(synth), "--provider", "http",
               "--endpoint", "http://127.0.0.1:9/v1/chat/completions", "--workers", "1", "--out", str(out)])
    assert rc == 4
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".")] == []


def test_parse_classes():
    a, b = parse_classes("0.5:0.1:3-9:4,0.1:0.5")
    assert (a.min_nodes, a.max_nodes, a.max_depth) == (3, 9, 4) and b.beta == 0.5
    for bad in ("0.5", "0.5:0.1", "a:b,0.1:0.1", "0.1:0.1:3,0.1:0.1"):
        with pytest.raises(UsageError):
            parse_classes(bad)
    assert DEFAULTS["train"]["lambda"] == 0.5
