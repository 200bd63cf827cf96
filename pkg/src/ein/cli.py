"""``ein`` command line: ingest, label, simulate, train, eval, sweep, plot.

Every subcommand reads an optional TOML run config (``--config``) with
sections ``[data] [labeler] [model] [train] [eval]``; explicit flags override
config keys. Outputs are written atomically and carry the resolved config and
package version.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import __version__
from .dynamics import GeneratorConfig, Regime, generate_dataset
from .ingest import (
    FORMATS,
    EmptyDataset,
    Featurizer,
    Record,
    SplitSpec,
    UnknownFormat,
    featurize,
    load_embedding_table,
    parse_records,
    read_ndtree,
    split,
    write_ndtree,
)
from .stance import HttpChatProvider, LabelCache, MockProvider, ProviderError, StanceLabeler, label_dataset
from .tree import TreeError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("ein")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 1, 2, 3, 4

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "format": "native",
        "featurizer": "hashing",
        "dim": 200,
        "embeddings": "",
        "split": [0.6, 0.2, 0.2],
        "classes": "0.6:0.2,0.2:0.6",
        "count": 2000,
        "sigma": 1.0,
        "signal": 1.0,
        "feature_source": "state",
    },
    "labeler": {
        "provider": "mock",
        "endpoint": "",
        "model": "gemma-2-9b-it",
        "temperature": 0.2,
        "token_env": "EIN_LLM_TOKEN",
        "cache": "",
        "workers": 4,
        "max_attempts": 3,
    },
    "model": {
        "backbone": "bigcn",
        "layers": 2,
        "hidden": 64,
        "dropout": 0.2,
        "dynamics": "eusd",
        "use_epi": True,
        "alpha0": 0.25,
        "beta0": 0.25,
    },
    "train": {
        "lambda": 0.5,
        "ce_weight": 1.0,
        "lr": 5e-4,
        "rate_lr": 0.0,
        "weight_decay": 1e-4,
        "batch_size": 128,
        "epochs": 50,
        "patience": 10,
        "dtype": "float32",
        "runs": 1,
    },
    "eval": {"split": "test", "by_depth": False},
    "sweep": {"init": [0.0, 0.5, 1.0, "random"], "lambda": [0.0, 0.001, 0.01, 0.1, 0.5, 1.0], "runs": 1},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in out:
            raise UsageError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where}{k} must be a table")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    if not path:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return _merge(DEFAULTS, doc)


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    """Flags whose dest is ``section__key`` (or ``seed``) override the config when given."""
    cfg = copy.deepcopy(cfg)
    for dest, value in vars(args).items():
        if value is None:
            continue
        if dest == "seed":
            cfg["seed"] = value
        elif "__" in dest:
            section, key = dest.split("__", 1)
            cfg[section][key] = value
    return cfg


def _rate(text: str):
    if text == "random":
        return "random"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number in [0, 1] or 'random'")
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("rate must lie in [0, 1]")
    return v


def parse_classes(spec: str) -> tuple[Regime, ...]:
    """``alpha:beta[:min-max[:max_depth]]`` per class, comma separated; class i gets label i."""
    regimes = []
    for part in spec.split(","):
        fields = part.strip().split(":")
        try:
            kw = {}
            if len(fields) >= 3:
                lo, hi = fields[2].split("-")
                kw.update(min_nodes=int(lo), max_nodes=int(hi))
            if len(fields) >= 4:
                kw["max_depth"] = int(fields[3])
            if not 2 <= len(fields) <= 4:
                raise ValueError
            regimes.append(Regime(float(fields[0]), float(fields[1]), **kw))
        except ValueError as exc:
            raise UsageError(f"bad class spec {part!r}: expected alpha:beta[:min-max[:max_depth]] ({exc})") from exc
    if len(regimes) != 2:
        raise UsageError("exactly two classes (non-rumor, rumor) are required")
    return tuple(regimes)


# ---------------------------------------------------------------------------
# artifacts


def provenance(cfg: dict, command: str) -> dict:
    return {"version": __version__, "command": command, "config": cfg}


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


@contextlib.contextmanager
def atomic_outputs(*paths: Path) -> Iterator[list[Path]]:
    """Yield temp paths next to the targets; move them into place only if the block succeeds."""
    temps = []
    try:
        for p in paths:
            p.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{p.name}.", suffix=p.suffix or ".tmp", dir=p.parent)
            os.close(fd)
            temps.append(Path(tmp))
        yield temps
        mode = 0o666 & ~_umask()
        for tmp, p in zip(temps, paths):
            os.chmod(tmp, mode)
            os.replace(tmp, p)
    finally:
        for tmp in temps:
            tmp.unlink(missing_ok=True)


def write_sidecar(path: Path, meta: dict) -> None:
    side = path.with_name(path.name + ".meta.json")
    with atomic_outputs(side) as (tmp,):
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def make_featurizer(data_cfg: dict) -> Featurizer:
    if data_cfg["featurizer"] == "embedding-table":
        if not data_cfg["embeddings"]:
            raise UsageError("featurizer 'embedding-table' needs data.embeddings")
        return Featurizer("embedding-table", int(data_cfg["dim"]), load_embedding_table(data_cfg["embeddings"]))
    if data_cfg["featurizer"] != "hashing":
        raise UsageError(f"unknown featurizer {data_cfg['featurizer']!r}")
    return Featurizer("hashing", int(data_cfg["dim"]))


def ensure_features(records: Sequence[Record], data_cfg: dict) -> list[Record]:
    if all(r.tree.features is not None for r in records):
        return list(records)
    fz = make_featurizer(data_cfg)
    return [r if r.tree.features is not None else Record(featurize(r.tree, fz), r.labels) for r in records]


def load_split(path: str, cfg: dict) -> tuple[list[Record], list[Record], list[Record]]:
    records, _ = read_ndtree(path)
    if not records:
        raise EmptyDataset(f"{path}: no valid events")
    records = ensure_features(records, cfg["data"])
    return split(records, SplitSpec(tuple(cfg["data"]["split"]), int(cfg["seed"])), label_of=lambda r: r.tree.label)


def train_config(cfg: dict, seed: int):
    from .training import TrainConfig

    m, t = cfg["model"], cfg["train"]
    return TrainConfig(
        backbone=m["backbone"],
        layers=int(m["layers"]),
        hidden=int(m["hidden"]),
        dropout=float(m["dropout"]),
        lam=float(t["lambda"]),
        ce_weight=float(t["ce_weight"]),
        alpha0=m["alpha0"],
        beta0=m["beta0"],
        dynamics=m["dynamics"],
        use_epi=bool(m["use_epi"]),
        lr=float(t["lr"]),
        rate_lr=float(t["rate_lr"]) or None,
        weight_decay=float(t["weight_decay"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        patience=int(t["patience"]),
        seed=seed,
        dtype=t["dtype"],
    )


def run_paths(out: Path, runs: int) -> list[Path]:
    if runs == 1:
        return [out]
    return [out.with_name(f"{out.stem}.run{i}{out.suffix}") for i in range(runs)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, cfg) -> None:
    records = parse_records(args.input, cfg["data"]["format"])
    out = Path(args.out)
    with atomic_outputs(out) as (tmp,):
        write_ndtree(tmp, records, meta=provenance(cfg, "ingest"))
    logger.info("wrote %d events to %s", len(records), out)


def make_provider(lab: dict):
    if lab["provider"] == "mock":
        return MockProvider()
    if lab["provider"] == "http":
        if not lab["endpoint"]:
            raise UsageError("provider 'http' needs --endpoint")
        return HttpChatProvider(lab["endpoint"], lab["model"], float(lab["temperature"]), lab["token_env"])
    raise UsageError(f"unknown provider {lab['provider']!r}")


def cmd_label(args, cfg) -> None:
    lab = cfg["labeler"]
    records, _ = read_ndtree(args.trees)
    if not records:
        raise EmptyDataset(f"{args.trees}: no valid events")
    labeler = StanceLabeler(
        make_provider(lab),
        LabelCache(lab["cache"] or None),
        max_attempts=int(lab["max_attempts"]),
        max_workers=int(lab["workers"]),
    )
    labels = label_dataset([r.tree for r in records], labeler)
    wanted = sum(r.tree.n >= 2 for r in records)
    got = sum(v is not None for v in labels.values())
    if wanted and not got:
        raise ProviderError("stance labeling failed for every tree")
    out = Path(args.out)
    with atomic_outputs(out) as (tmp,):
        write_ndtree(
            tmp,
            [Record(r.tree, labels[r.tree.event_id]) for r in records],
            meta=provenance(cfg, "label"),
            with_features=any(r.tree.features is not None for r in records),
        )
    logger.info("labeled %d of %d trees with responses", got, wanted)


def cmd_simulate(args, cfg) -> None:
    d = cfg["data"]
    gen = GeneratorConfig(
        regimes=parse_classes(d["classes"]),
        dim=int(d["dim"]),
        sigma=float(d["sigma"]),
        signal=float(d["signal"]),
        feature_source=d["feature_source"],
    )
    data = generate_dataset(gen, int(d["count"]), int(cfg["seed"]))
    out = Path(args.out)
    with atomic_outputs(out) as (tmp,):
        write_ndtree(tmp, [Record(t, l) for t, l in data], meta=provenance(cfg, "simulate"), with_features=True)
    logger.info("wrote %d synthetic trees to %s", len(data), out)


def cmd_train(args, cfg) -> None:
    from .training import save_checkpoint, train

    tr, va, _ = load_split(args.data, cfg)
    runs = int(cfg["train"]["runs"])
    outs = run_paths(Path(args.out), runs)
    for i, out in enumerate(outs):
        seed = int(cfg["seed"]) + i
        tcfg = train_config(cfg, seed)
        result = train(tr, va, tcfg)
        log_path = out.with_name(out.name + ".log.jsonl")
        with atomic_outputs(out, log_path) as (tmp_ckpt, tmp_log):
            save_checkpoint(tmp_ckpt, result.model, tcfg, provenance(cfg, "train"))
            with open(tmp_log, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"_meta": provenance(cfg, "train") | {"seed": seed}}, default=str) + "\n")
                for entry in result.log:
                    fh.write(json.dumps(entry) + "\n")
        logger.info("run %d: best epoch %d -> %s", i, result.best_epoch, out)


def _eval_rows(ckpt: str, data: str, split_name: str, by_depth: bool, run_id: str):
    from .evaluation import depth_stratified
    from .model import predict_proba
    from .training import load_checkpoint

    model, _, blob = load_checkpoint(ckpt)
    run_cfg = _merge(DEFAULTS, blob.get("run_config", {}).get("config", {}))
    parts = dict(zip(("train", "val", "test"), load_split(data, run_cfg)))
    records = [r for p in parts.values() for r in p] if split_name == "all" else parts[split_name]
    if not records:
        raise EmptyDataset(f"split {split_name!r} is empty")
    if records[0].tree.features.shape[1] != model.in_dim:
        raise EmptyDataset(f"features have dim {records[0].tree.features.shape[1]}, checkpoint expects {model.in_dim}")
    scores = predict_proba(model, records)
    rows = depth_stratified([r.tree for r in records], scores, run_id, split_name)
    return rows if by_depth else rows[:1]


def cmd_eval(args, cfg) -> None:
    from .evaluation import aggregate_runs, write_metrics_csv

    ckpts = args.ckpt
    rows = []
    for i, ck in enumerate(ckpts):
        rows += _eval_rows(ck, args.data, cfg["eval"]["split"], bool(cfg["eval"]["by_depth"]), Path(ck).stem if len(ckpts) > 1 else "run0")
    out = Path(args.out)
    meta = provenance(cfg, "eval") | {"checkpoints": [str(c) for c in ckpts]}
    outputs = [out]
    summary = None
    if len(ckpts) > 1:
        summary = aggregate_runs(rows)
        outputs.append(out.with_name(out.stem + ".summary.csv"))
    with atomic_outputs(*outputs) as tmps:
        write_metrics_csv(tmps[0], rows)
        if summary is not None:
            with open(tmps[1], "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=list(summary[0]))
                w.writeheader()
                w.writerows(summary)
    for p in outputs:
        write_sidecar(p, meta)
    for r in rows:
        if r.bucket == "all":
            logger.info("%s %s acc=%.4f auc=%s f1=%.4f n=%d", r.run_id, r.split, r.acc, r.auc, r.f1, r.support)


def cmd_sweep(args, cfg) -> None:
    from .evaluation import compute_metrics
    from .model import predict_proba
    from .training import train

    sw = cfg["sweep"]
    tr, va, te = load_split(args.data, cfg)
    labels = [r.tree.label for r in te]
    grid = [("alpha0,beta0", v) for v in sw["init"]] + [("lambda", v) for v in sw["lambda"]]
    rows = []
    for param, value in grid:
        run_cfg = copy.deepcopy(cfg)
        if param == "lambda":
            run_cfg["train"]["lambda"] = float(value)
        else:
            run_cfg["model"]["alpha0"] = run_cfg["model"]["beta0"] = value
        metrics = []
        for i in range(int(sw["runs"])):
            result = train(tr, va, train_config(run_cfg, int(cfg["seed"]) + i))
            acc, auc, f1 = compute_metrics(predict_proba(result.model, te), labels)
            metrics.append((acc, np.nan if auc is None else auc, f1))
        m = np.array(metrics)
        std = m.std(0, ddof=1) if len(m) > 1 else np.zeros(3)
        rows.append(
            {"param": param, "value": value, "runs": len(m),
             **{f"{k}_mean": float(m[:, j].mean()) for j, k in enumerate(("acc", "auc", "f1"))},
             **{f"{k}_std": float(std[j]) for j, k in enumerate(("acc", "auc", "f1"))}}
        )
        logger.info("%s=%s acc=%.4f", param, value, rows[-1]["acc_mean"])
    out = Path(args.out)
    with atomic_outputs(out) as (tmp,):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    write_sidecar(out, provenance(cfg, "sweep"))


def cmd_plot(args, cfg) -> None:
    from .evaluation import export_case_study
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(args.ckpt)
    records, _ = read_ndtree(args.data)
    match = [r.tree for r in records if r.tree.event_id == args.event_id]
    if not match:
        raise EmptyDataset(f"event {args.event_id!r} not found in {args.data}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out.with_suffix(".csv"), out.with_suffix(".png")
    with tempfile.TemporaryDirectory(dir=out.parent, prefix=".plot.") as tmp:
        _, c, p = export_case_study(model, match[0], Path(tmp) / out.stem)
        os.replace(c, csv_path)
        os.replace(p, png_path)
    meta = provenance(cfg, "plot") | {"checkpoint": str(args.ckpt), "event_id": args.event_id}
    write_sidecar(csv_path, meta)
    write_sidecar(png_path, meta)


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ein", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ein {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="convert a raw dataset to the native format")
    s.add_argument("--input", required=True)
    s.add_argument("--format", dest="data__format", choices=FORMATS)
    s.add_argument("--out", required=True)

    s = sub.add_parser("label", parents=[common], help="attach stance/state labels")
    s.add_argument("--trees", required=True)
    s.add_argument("--provider", dest="labeler__provider", choices=("mock", "http"))
    s.add_argument("--endpoint", dest="labeler__endpoint")
    s.add_argument("--model", dest="labeler__model")
    s.add_argument("--temperature", dest="labeler__temperature", type=float)
    s.add_argument("--cache", dest="labeler__cache")
    s.add_argument("--workers", dest="labeler__workers", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic labeled dataset")
    s.add_argument("--classes", dest="data__classes", help="alpha:beta[:min-max[:max_depth]] for class 0 and 1")
    s.add_argument("--count", dest="data__count", type=int)
    s.add_argument("--dim", dest="data__dim", type=int)
    s.add_argument("--sigma", dest="data__sigma", type=float)
    s.add_argument("--signal", dest="data__signal", type=float)
    s.add_argument("--feature-source", dest="data__feature_source", choices=("state", "stance"))
    s.add_argument("--out", required=True)

    def model_flags(s):
        s.add_argument("--backbone", dest="model__backbone", choices=("gcn", "resgcn", "bigcn"))
        s.add_argument("--layers", dest="model__layers", type=int)
        s.add_argument("--hidden", dest="model__hidden", type=int)
        s.add_argument("--dropout", dest="model__dropout", type=float)
        s.add_argument("--dynamics", dest="model__dynamics", choices=("eusd", "usd"))
        s.add_argument("--no-epi", dest="model__use_epi", action="store_const", const=False)
        s.add_argument("--lambda", dest="train__lambda", type=float)
        s.add_argument("--ce-weight", dest="train__ce_weight", type=float)
        s.add_argument("--lr", dest="train__lr", type=float)
        s.add_argument("--epochs", dest="train__epochs", type=int)
        s.add_argument("--patience", dest="train__patience", type=int)
        s.add_argument("--batch-size", dest="train__batch_size", type=int)
        s.add_argument("--dtype", dest="train__dtype", choices=("float32", "float64"))

    s = sub.add_parser("train", parents=[common], help="train one or more runs")
    s.add_argument("--data", required=True)
    model_flags(s)
    s.add_argument("--alpha0", dest="model__alpha0", type=_rate)
    s.add_argument("--beta0", dest="model__beta0", type=_rate)
    s.add_argument("--runs", dest="train__runs", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="score checkpoints on a split")
    s.add_argument("--ckpt", required=True, action="append")
    s.add_argument("--data", required=True)
    s.add_argument("--split", dest="eval__split", choices=("train", "val", "test", "all"))
    s.add_argument("--by-depth", dest="eval__by_depth", action="store_const", const=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("sweep", parents=[common], help="alpha0/beta0 and lambda sensitivity grid")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", help="TOML file with a [sweep] table (init, lambda, runs)")
    model_flags(s)
    s.add_argument("--out", required=True)

    s = sub.add_parser("plot", parents=[common], help="stage table and stacked-area figure for one event")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--event-id", required=True)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "label": cmd_label,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ein: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "grid", None):
            cfg["sweep"] = load_config(args.grid)["sweep"]
        cfg = apply_overrides(cfg, args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"ein: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProviderError as exc:
        print(f"ein: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (TreeError, UnknownFormat, EmptyDataset, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"ein: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"ein: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
