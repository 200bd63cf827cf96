"""Metrics, depth-stratified reports, multi-run aggregation and case-study export."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .tree import PropagationTree, depth, depth_bucket

THRESHOLD = 0.5
BUCKETS = ("all", "D1", "D2to5", "Dgt5", "degenerate")
METRICS = ("acc", "auc", "f1")
CSV_HEADER = ("run_id", "split", "bucket", "acc", "auc", "f1", "support")


def compute_metrics(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, Optional[float], float]:
    """Accuracy and positive-class F1 at threshold 0.5, plus rank AUC.

    AUC is the Mann-Whitney statistic with ties counted as half; it is None
    when one class is absent.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores vs {len(y)} labels")
    if s.size == 0:
        raise ValueError("need at least one item")
    pred = (s >= THRESHOLD).astype(int)
    acc = float(np.mean(pred == y))
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return acc, None, float(f1)
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return acc, float(auc), float(f1)


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    split: str
    bucket: str
    acc: float
    auc: Optional[float]
    f1: float
    support: int


def tree_bucket(tree: PropagationTree) -> str:
    d = depth(tree)
    return "degenerate" if d == 0 else depth_bucket(d).value


def depth_stratified(
    trees: Sequence[PropagationTree],
    scores: Sequence[float],
    run_id: str = "run0",
    split: str = "test",
) -> list[MetricsRow]:
    """One "all" row plus one row per depth bucket (empty buckets get NaN metrics)."""
    if len(trees) != len(scores):
        raise ValueError("predictions must align with trees")
    scores = np.asarray(scores, dtype=float)
    labels = np.array([t.label for t in trees])
    buckets = np.array([tree_bucket(t) for t in trees])
    rows = []
    for b in BUCKETS:
        mask = np.ones(len(trees), bool) if b == "all" else buckets == b
        if mask.any():
            acc, auc, f1 = compute_metrics(scores[mask], labels[mask])
        else:
            acc, auc, f1 = math.nan, None, math.nan
        rows.append(MetricsRow(run_id, split, b, acc, auc, f1, int(mask.sum())))
    return rows


def bucket_proportions(depths: Iterable[int]) -> dict[str, float]:
    """Percentage of trees per bucket, as in a depth-distribution table."""
    counts = Counter("degenerate" if d == 0 else depth_bucket(d).value for d in depths)
    total = sum(counts.values())
    return {b: 100.0 * counts.get(b, 0) / total for b in BUCKETS[1:]}


def aggregate_runs(rows: Sequence[MetricsRow]) -> list[dict]:
    """Mean and sample standard deviation per (split, bucket) across runs."""
    by_run: dict[str, dict[tuple[str, str], MetricsRow]] = {}
    for r in rows:
        by_run.setdefault(r.run_id, {})[(r.split, r.bucket)] = r
    if len(by_run) < 2:
        raise ValueError(f"need at least 2 runs, got {len(by_run)}")
    keys = [set(v) for v in by_run.values()]
    if any(k != keys[0] for k in keys):
        raise ValueError("runs report different buckets")
    out = []
    for key in sorted(keys[0], key=lambda k: (k[0], BUCKETS.index(k[1]) if k[1] in BUCKETS else 99, k[1])):
        entry: dict = {"split": key[0], "bucket": key[1], "runs": len(by_run)}
        for m in METRICS:
            vals = np.array([np.nan if getattr(run[key], m) is None else getattr(run[key], m) for run in by_run.values()], dtype=float)
            entry[f"{m}_mean"] = float(np.mean(vals))
            entry[f"{m}_std"] = float(np.std(vals, ddof=1))
        entry["support_mean"] = float(np.mean([run[key].support for run in by_run.values()]))
        out.append(entry)
    return out


def write_metrics_csv(path: str | Path, rows: Iterable[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            d = asdict(r)
            w.writerow(["" if d[k] is None else d[k] for k in CSV_HEADER])


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    def num(v):
        return None if v == "" else float(v)

    with open(path, newline="", encoding="utf-8") as fh:
        return [
            MetricsRow(r["run_id"], r["split"], r["bucket"], num(r["acc"]), num(r["auc"]), num(r["f1"]), int(r["support"]))
            for r in csv.DictReader(fh)
        ]


def stage_table(model, tree: PropagationTree) -> np.ndarray:
    """Predicted (Unknown, Support, Denial) distribution per stage, shape ``(T, 3)``."""
    import torch

    from .encoder import encode

    if model.encoder is None:
        raise ValueError("model has no epidemiology encoder")
    model.eval()
    with torch.no_grad():
        _, p_hat = encode(tree, model.encoder)
    return p_hat.double().numpy()


def export_case_study(model, tree: PropagationTree, out: str | Path) -> tuple[np.ndarray, Path, Path]:
    """Write ``<out>.csv`` (stage table) and ``<out>.png`` (stacked areas)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(model, (str, Path)):
        from .training import load_checkpoint

        model, _, _ = load_checkpoint(model)
    table = stage_table(model, tree)
    out = Path(out)
    csv_path, png_path = out.with_suffix(".csv"), out.with_suffix(".png")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("stage", "unknown", "support", "denial"))
        for t, row in enumerate(table, 1):
            w.writerow((t, *(f"{v:.6f}" for v in row)))

    stages = np.arange(1, len(table) + 1)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.stackplot(stages, table[:, 1], table[:, 2], table[:, 0], labels=("Support", "Denial", "Unknown"),
                 colors=("#4c9f70", "#d1495b", "#cccccc"))
    ax.set_xlabel("stage (tree depth)")
    ax.set_ylabel("share")
    ax.set_ylim(0, 1)
    ax.set_title(f"event {tree.event_id} (label {tree.label})")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return table, csv_path, png_path
