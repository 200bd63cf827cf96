"""Stance annotation with an LLM (or lexicon mock) and XOR state propagation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from string import Template
from typing import Callable, Iterable, Optional, Protocol

import httpx

from .tree import PropagationTree

logger = logging.getLogger(__name__)

PROMPT_VERSION = "v1"

ROOT_TEMPLATE = (
    "- Source post: '$source_sentence'\n"
    "- Responsive post: '$response_sentence'\n"
    "- Based on the content of the response comment, determine its attitude towards the source "
    "post and choose one of the following options: The response comment believes the source "
    "post: 0, The response comment does not believe (or doubts) the source post: 1. If the "
    "response comment only contains '@' someone(s) without any other content, then you can "
    "consider that the response is believing the source post. You only need to select one label "
    "from the options above as the final result, no additional text is required."
)

REPLY_TEMPLATE = (
    "- Source post: '$source_sentence'\n"
    "- Responsive post: '$response_sentence'\n"
    "- Based on the content of the response sentence, determine its attitude towards the source "
    "sentence and choose one of the following options: The response sentence agrees with the "
    "source sentence: 0, The response sentence disagrees (or doubts) the source sentence:1. If "
    "the response sentence only contains '@' someone(s) without any other content, then you can "
    "consider that the response is agreeing to the source sentence. You only need to select one "
    "label from the options above as the final result, no additional text is required."
)

DENY_LEXICON = frozenset({"fake", "false", "doubt", "rumor", "lie", "假", "谣言", "骗"})

_WORD = re.compile(r"\w+", re.UNICODE)
_STANCE_TOKEN = re.compile(r"(?<![\w.])([01])(?!\w|\.\d)")


class UnparseableStance(ValueError):
    pass


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Prompts:
    root_template: str = ROOT_TEMPLATE
    reply_template: str = REPLY_TEMPLATE
    version: str = PROMPT_VERSION


@dataclass(frozen=True)
class StateLabels:
    """Stance (vs parent) and state (vs root) labels for every non-root node.

    ``states[v] = states[parent(v)] ^ stances[v]``, with the root's children
    taking their stance directly as state.
    """

    event_id: str
    states: dict[int, int]
    stances: dict[int, int]


def render_prompt(parent_text: str, child_text: str, parent_is_root: bool, prompts: Prompts = Prompts()) -> str:
    template = prompts.root_template if parent_is_root else prompts.reply_template
    # Template substitution is single pass, so braces or '$' inside post text are left alone.
    return Template(template).substitute(source_sentence=parent_text, response_sentence=child_text)


def parse_stance(raw_llm_output: str) -> int:
    m = _STANCE_TOKEN.search(raw_llm_output.strip())
    if m is None:
        raise UnparseableStance(f"no standalone 0/1 in {raw_llm_output!r}")
    return int(m.group(1))


def mock_stance(parent_text: str, child_text: str) -> int:
    text = child_text.lower()
    words = set(_WORD.findall(text))
    for entry in DENY_LEXICON:
        if entry.isascii():
            if entry in words:
                return 1
        elif entry in text:
            return 1
    return 0


class StanceProvider(Protocol):
    provider_id: str

    def __call__(self, parent_text: str, child_text: str, parent_is_root: bool) -> str: ...


class MockProvider:
    provider_id = "mock"

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, parent_text: str, child_text: str, parent_is_root: bool) -> str:
        with self._lock:
            self.calls += 1
        return str(mock_stance(parent_text, child_text))


class HttpChatProvider:
    """Chat-completion client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        temperature: float = 0.2,
        token_env: str = "EIN_LLM_TOKEN",
        timeout: float = 60.0,
        prompts: Prompts = Prompts(),
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.prompts = prompts
        self.provider_id = f"http:{model}"
        headers = {}
        token = os.environ.get(token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }

    def __call__(self, parent_text: str, child_text: str, parent_is_root: bool) -> str:
        prompt = render_prompt(parent_text, child_text, parent_is_root, self.prompts)
        try:
            resp = self._client.post(self.endpoint, json=self.request_body(prompt))
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"chat completion failed: {exc}") from exc

    def close(self):
        self._client.close()


def cache_key(parent_text: str, child_text: str, parent_is_root: bool, prompt_version: str) -> str:
    payload = json.dumps([parent_text, child_text, bool(parent_is_root), prompt_version], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LabelCacheEntry:
    key: str
    stance: int
    provider_id: str
    prompt_version: str = PROMPT_VERSION


class LabelCache:
    """Append-only stance cache, optionally backed by a JSON-lines file.

    Appends go through one lock so concurrent labelers never interleave lines.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, LabelCacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries[rec["key"]] = LabelCacheEntry(
                            rec["key"], int(rec["stance"]), rec["provider_id"], rec.get("prompt_version", "")
                        )

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> Optional[LabelCacheEntry]:
        return self._entries.get(key)

    def put(self, entry: LabelCacheEntry) -> None:
        with self._lock:
            if entry.key in self._entries:
                return
            self._entries[entry.key] = entry
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.__dict__, ensure_ascii=False) + "\n")


@dataclass
class StanceLabeler:
    provider: Callable[[str, str, bool], str]
    cache: LabelCache = field(default_factory=LabelCache)
    prompt_version: str = PROMPT_VERSION
    max_attempts: int = 3
    backoff: float = 0.5
    max_workers: int = 4

    def _query(self, parent_text: str, child_text: str, parent_is_root: bool) -> int:
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                return parse_stance(self.provider(parent_text, child_text, parent_is_root))
            except (UnparseableStance, ProviderError) as exc:
                last = exc
                logger.debug("stance attempt %d failed: %s", attempt + 1, exc)
        assert last is not None
        raise last

    def label_tree(self, tree: PropagationTree) -> StateLabels:
        if tree.n < 2:
            raise ValueError(f"event {tree.event_id}: labeling needs at least one response")
        texts = tree.texts
        keys = {}
        for v in range(1, tree.n):
            p = tree.nodes[v].parent
            keys[v] = cache_key(texts[p], texts[v], p == 0, self.prompt_version)

        missing = {}
        for v, k in keys.items():
            if k not in self.cache and k not in missing:
                missing[k] = v
        if missing:
            provider_id = getattr(self.provider, "provider_id", type(self.provider).__name__)

            def fetch(item):
                k, v = item
                p = tree.nodes[v].parent
                stance = self._query(texts[p], texts[v], p == 0)
                self.cache.put(LabelCacheEntry(k, stance, provider_id, self.prompt_version))

            workers = max(1, min(self.max_workers, len(missing)))
            if workers == 1:
                for item in missing.items():
                    fetch(item)
            else:
                with ThreadPoolExecutor(workers) as pool:
                    list(pool.map(fetch, missing.items()))

        stances = {v: self.cache.get(k).stance for v, k in keys.items()}
        return StateLabels(tree.event_id, states_from_stances(tree, stances), stances)


def label_tree(tree: PropagationTree, client: Callable[[str, str, bool], str], cache: Optional[LabelCache] = None, **kwargs) -> StateLabels:
    return StanceLabeler(client, cache if cache is not None else LabelCache(), **kwargs).label_tree(tree)


def label_dataset(trees: Iterable[PropagationTree], labeler: StanceLabeler) -> dict[str, Optional[StateLabels]]:
    """Label every tree; failed or root-only trees map to ``None`` and stay out of the state loss."""
    out: dict[str, Optional[StateLabels]] = {}
    failed = 0
    for tree in trees:
        if tree.n < 2:
            out[tree.event_id] = None
            continue
        try:
            out[tree.event_id] = labeler.label_tree(tree)
        except (UnparseableStance, ProviderError) as exc:
            failed += 1
            logger.warning("event %s excluded from state loss: %s", tree.event_id, exc)
            out[tree.event_id] = None
    if failed:
        logger.warning("%d trees failed stance labeling", failed)
    return out


def states_from_stances(tree: PropagationTree, stances: dict[int, int]) -> dict[int, int]:
    states: dict[int, int] = {}
    for v in range(1, tree.n):
        p = tree.nodes[v].parent
        states[v] = stances[v] if p == 0 else states[p] ^ stances[v]
    return states


def check_labels(tree: PropagationTree, labels: StateLabels) -> None:
    expected = set(range(1, tree.n))
    if set(labels.states) != expected or set(labels.stances) != expected:
        raise ValueError(f"event {tree.event_id}: labels must cover exactly the non-root nodes")
    if states_from_stances(tree, labels.stances) != labels.states:
        raise ValueError(f"event {tree.event_id}: states are not the XOR closure of stances")
