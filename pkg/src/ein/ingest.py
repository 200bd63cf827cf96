"""Dataset adapters, native ``.ndtree`` IO, node featurization and splitting."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

import numpy as np

from .stance import StateLabels, check_labels
from .tree import PropagationTree, TreeError, build_tree

logger = logging.getLogger(__name__)

FORMATS = ("native", "weibo-style", "pheme-style")


class UnknownFormat(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class Record:
    tree: PropagationTree
    labels: Optional[StateLabels] = None


# ---------------------------------------------------------------------------
# native format


def tree_to_record(tree: PropagationTree, labels: Optional[StateLabels] = None, with_features: bool = False) -> dict:
    rec: dict[str, Any] = {
        "id": tree.event_id,
        "label": tree.label,
        "nodes": [{"id": v.id, "parent": v.parent, "text": v.text} for v in tree.nodes],
    }
    if labels is not None:
        rec["states"] = {str(k): v for k, v in sorted(labels.states.items())}
        rec["stances"] = {str(k): v for k, v in sorted(labels.stances.items())}
    if with_features and tree.features is not None:
        rec["features"] = tree.features.tolist()
    return rec


def record_to_tree(rec: dict) -> Record:
    if not isinstance(rec.get("nodes"), list) or "id" not in rec or rec.get("label") not in (0, 1):
        raise TreeError("record needs id, label in {0,1} and a node list")
    raw = []
    for node in rec["nodes"]:
        raw.append((node["id"], node.get("parent"), node.get("text", ""), node.get("timestamp")))
    tree = build_tree(str(rec["id"]), rec["label"], raw)
    if [v.id for v in tree.nodes] != [n["id"] for n in rec["nodes"]] and any(k in rec for k in ("states", "features")):
        # node-keyed payloads are only meaningful in canonical order
        raise TreeError(f"event {rec['id']}: labeled/featurized record is not in canonical order")
    if "features" in rec:
        tree = tree.with_features(np.asarray(rec["features"], dtype=float))
    labels = None
    if "states" in rec and "stances" in rec:
        labels = StateLabels(
            tree.event_id,
            {int(k): int(v) for k, v in rec["states"].items()},
            {int(k): int(v) for k, v in rec["stances"].items()},
        )
        check_labels(tree, labels)
    return Record(tree, labels)


def read_ndtree(path: str | Path) -> tuple[list[Record], dict]:
    """Read a native file; returns records plus the optional ``_meta`` header."""
    records: list[Record] = []
    meta: dict = {}
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "_meta" in rec and "nodes" not in rec:
                    meta = rec["_meta"]
                    continue
                records.append(record_to_tree(rec))
            except (ValueError, KeyError, TypeError) as exc:
                skipped += 1
                logger.warning("%s:%d skipped: %s", path, lineno, exc)
    if skipped:
        logger.warning("%s: skipped %d malformed events", path, skipped)
    return records, meta


def write_ndtree(
    path: str | Path,
    records: Iterable[Record],
    meta: Optional[dict] = None,
    with_features: bool = False,
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, ensure_ascii=False, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(tree_to_record(r.tree, r.labels, with_features), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# third-party layouts


def _iter_weibo_style(path: Path) -> Iterator[tuple[str, int, list]]:
    """Classic Weibo layout: ``Weibo.txt`` (``eid:X label:Y ...``) plus ``Weibo/<eid>.json``.

    Each event JSON is a list of posts with ``mid``, ``parent`` (null for the
    source) and ``text``. A directory holding only per-event JSON objects of
    the form ``{"source": {...}, "comment": [...]}`` is read as the DRWeibo
    release, where comments carry ``comment id``/``parent``/``content``.
    """
    index = path / "Weibo.txt" if path.is_dir() else path
    if index.is_file():
        posts_dir = index.parent / "Weibo"
        for line in index.read_text(encoding="utf-8").splitlines():
            fields = dict(f.split(":", 1) for f in line.split() if ":" in f)
            if "eid" not in fields or "label" not in fields:
                continue
            eid = fields["eid"]
            posts_file = posts_dir / f"{eid}.json"
            try:
                posts = json.loads(posts_file.read_text(encoding="utf-8"))
                raw = [(p["mid"], p.get("parent"), p.get("text", ""), p.get("t")) for p in posts]
            except (OSError, ValueError, KeyError, TypeError) as exc:
                logger.warning("weibo event %s unreadable: %s", eid, exc)
                yield eid, -1, []
                continue
            yield eid, int(fields["label"]), raw
        return
    for f in sorted(path.glob("*.json")):
        try:
            doc = json.loads(f.read_text(encoding="utf-8"))
            src = doc["source"]
            root_id = src.get("tweet id", src.get("id", "root"))
            raw = [(root_id, None, src.get("content", src.get("text", "")))]
            for c in doc.get("comment", []):
                parent = c.get("parent")
                if parent in (None, -1, "-1", ""):
                    parent = root_id
                raw.append((c["comment id"], parent, c.get("content", c.get("text", ""))))
            yield f.stem, int(src["label"]), raw
        except (OSError, ValueError, KeyError, TypeError) as exc:
            logger.warning("weibo event %s unreadable: %s", f.name, exc)
            yield f.stem, -1, []


def _tweet(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _iter_pheme_style(path: Path) -> Iterator[tuple[str, int, list]]:
    """PHEME layout: ``<event>/<rumours|non-rumours>/<thread>/{source-tweets,reactions}/*.json``.

    Reactions replying to a tweet outside the thread are attached to the source.
    """
    for thread in sorted(p for p in path.glob("*/*/*") if p.is_dir()):
        kind = thread.parent.name
        if kind not in ("rumours", "non-rumours"):
            continue
        label = 1 if kind == "rumours" else 0
        try:
            src_files = sorted((thread / "source-tweets").glob("*.json"))
            src = _tweet(src_files[0])
            root_id = str(src.get("id_str", src.get("id")))
            tweets = [_tweet(f) for f in sorted((thread / "reactions").glob("*.json"))]
            ids = {root_id} | {str(t.get("id_str", t.get("id"))) for t in tweets}
            raw = [(root_id, None, src.get("full_text", src.get("text", "")))]
            for t in tweets:
                tid = str(t.get("id_str", t.get("id")))
                if tid == root_id:
                    continue
                parent = str(t.get("in_reply_to_status_id_str") or t.get("in_reply_to_status_id") or "")
                raw.append((tid, parent if parent in ids and parent != tid else root_id, t.get("full_text", t.get("text", ""))))
        except (OSError, ValueError, KeyError, IndexError, TypeError) as exc:
            logger.warning("pheme thread %s unreadable: %s", thread, exc)
            yield thread.name, -1, []
            continue
        yield thread.name, label, raw


def parse_records(path: str | Path, format: str = "native") -> list[Record]:
    if format not in FORMATS:
        raise UnknownFormat(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if format == "native":
        records, _ = read_ndtree(path)
    else:
        events = _iter_weibo_style(path) if format == "weibo-style" else _iter_pheme_style(path)
        records, skipped = [], 0
        for eid, label, raw in events:
            try:
                records.append(Record(build_tree(eid, label, raw)))
            except TreeError as exc:
                skipped += 1
                logger.warning("event %s skipped: %s", eid, exc)
        if skipped:
            logger.warning("%s: skipped %d malformed events", path, skipped)
    if not records:
        raise EmptyDataset(f"no valid events in {path}")
    return records


def parse_dataset(path: str | Path, format: str = "native") -> list[PropagationTree]:
    return [r.tree for r in parse_records(path, format)]


# ---------------------------------------------------------------------------
# features

_CJK = r"\u3040-\u30ff\u3400-\u4dbf\u4e00-\u9fff\uac00-\ud7af\uf900-\ufaff"
_TOKEN = re.compile(rf"[{_CJK}]|[^\W_{_CJK}]+")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; CJK characters become one token each."""
    return _TOKEN.findall(text.lower())


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


@dataclass
class Featurizer:
    mode: str = "hashing"
    dim: int = 200
    table: Optional[dict[str, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("hashing", "embedding-table"):
            raise ValueError(f"unknown featurizer mode {self.mode!r}")
        if self.mode == "embedding-table":
            if not self.table:
                raise ValueError("embedding-table mode needs a token table")
            dims = {len(v) for v in self.table.values()}
            if dims != {self.dim}:
                raise ValueError(f"table vectors have dims {sorted(dims)}, expected {self.dim}")

    def vector(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim)
        tokens = tokenize(text)
        if self.mode == "hashing":
            for tok in tokens:
                out[_bucket(tok, self.dim)] += 1.0
            norm = np.linalg.norm(out)
            return out / norm if norm > 0 else out
        hits = [self.table[t] for t in tokens if t in self.table]
        return np.mean(hits, axis=0) if hits else out


def load_embedding_table(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``token<TAB>v1 v2 ... vh`` lines."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            token, _, values = line.rstrip("\n").partition("\t")
            table[token] = np.array(values.split(), dtype=float)
    return table


def featurize(tree: PropagationTree, f: Featurizer) -> PropagationTree:
    return tree.with_features(np.stack([f.vector(t) for t in tree.texts]))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or min(self.ratios) <= 0 or not math.isclose(sum(self.ratios), 1.0):
            raise ValueError(f"ratios must be three positive numbers summing to 1, got {self.ratios}")


def _apportion(total: int, weights: list[int]) -> list[int]:
    """Largest-remainder allocation of ``total`` proportional to ``weights``."""
    wsum = sum(weights)
    exact = [total * w / wsum for w in weights]
    alloc = [math.floor(e) for e in exact]
    order = sorted(range(len(weights)), key=lambda i: (exact[i] - alloc[i], weights[i]), reverse=True)
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def split(dataset: list, spec: SplitSpec = SplitSpec(), label_of=None) -> tuple[list, list, list]:
    """Stratified train/val/test split; val and test get ``floor(ratio * N)`` items.

    ``label_of`` extracts the class from an item (defaults to ``item.label`` or
    ``item.tree.label``), so both trees and records can be split.
    """
    n = len(dataset)
    if n < 5:
        raise ValueError(f"need at least 5 items to split, got {n}")
    if label_of is None:
        def label_of(item):
            return item.tree.label if hasattr(item, "tree") else item.label

    n_val = math.floor(spec.ratios[1] * n)
    n_test = math.floor(spec.ratios[2] * n)
    rng = np.random.default_rng(spec.seed)
    by_class: dict[int, list[int]] = {}
    for i, item in enumerate(dataset):
        by_class.setdefault(label_of(item), []).append(i)
    classes = sorted(by_class)
    for c in classes:
        rng.shuffle(by_class[c])
    sizes = [len(by_class[c]) for c in classes]
    val_q = _apportion(n_val, sizes)
    test_q = _apportion(n_test, sizes)

    train, val, test = [], [], []
    for c, vq, tq in zip(classes, val_q, test_q):
        idx = by_class[c]
        val += idx[:vq]
        test += idx[vq : vq + tq]
        train += idx[vq + tq :]
    parts = []
    for part in (train, val, test):
        part = sorted(part)
        parts.append([dataset[i] for i in part])
    return tuple(parts)
