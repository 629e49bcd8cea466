"""Prompt batches, the prompt pool and the meta-prompting client boundary.

Batch document (UTF-8 JSON)::

    {
      "meta_prompt_id": "stairs-courtyards",
      "pairs": [
        {"id": "p000", "foreground": "...", "background": "...", "tags": ["rain", "dusk"]},
        ...
      ]
    }

Unknown keys at either level are kept and written back in their original
order, so ``serialize_prompt_batch(parse_prompt_batch(doc)) == doc`` for any
document that was itself produced by ``serialize_prompt_batch``.

Pool directory::

    <root>/batches/<meta_prompt_id>.json   one batch document each
    <root>/counters.json                   {"<pair id>": <draws>, ...}
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

BATCH_SIZE_RANGE = (20, 30)
POOL_TARGET = 1000
PROMPT_URL_ENV = "DREAMWEAVE_PROMPT_URL"
PROMPT_TOKEN_ENV = "DREAMWEAVE_PROMPT_TOKEN"
PROMPT_MODEL_ENV = "DREAMWEAVE_PROMPT_MODEL"

_PAIR_KEYS = ("id", "foreground", "background", "tags")
_BATCH_KEYS = ("meta_prompt_id", "pairs")


class PromptSchemaError(ValueError):
    """Raised for an invalid batch document; ``path`` names the offending element."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class PromptTransportError(RuntimeError):
    pass


class MalformedReplyError(ValueError):
    def __init__(self, message: str, reply: str):
        super().__init__(message)
        self.reply = reply


class EmptyPoolError(LookupError):
    pass


@dataclass(frozen=True)
class PromptPair:
    id: str
    foreground: str
    background: str
    tags: tuple[str, ...] | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.foreground.strip() or not self.background.strip():
            raise ValueError("foreground and background prompts must be non-empty")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "foreground": self.foreground, "background": self.background}
        if self.tags is not None:
            out["tags"] = list(self.tags)
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class PromptBatch:
    meta_prompt_id: str
    pairs: tuple[PromptPair, ...]
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"meta_prompt_id": self.meta_prompt_id, "pairs": [p.to_dict() for p in self.pairs]}
        out.update(self.extra)
        return out


def _text(obj: Mapping, key: str, path: str) -> str:
    if key not in obj:
        raise PromptSchemaError(f"{path}.{key}", "missing")
    value = obj[key]
    if not isinstance(value, str):
        raise PromptSchemaError(f"{path}.{key}", f"expected string, got {type(value).__name__}")
    if not value.strip():
        raise PromptSchemaError(f"{path}.{key}", "empty prompt")
    return value


def _parse_pair(obj: Any, path: str) -> PromptPair:
    if not isinstance(obj, dict):
        raise PromptSchemaError(path, "expected object")
    tags = obj.get("tags")
    if tags is not None:
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise PromptSchemaError(f"{path}.tags", "expected list of strings")
        tags = tuple(tags)
    return PromptPair(
        id=_text(obj, "id", path),
        foreground=_text(obj, "foreground", path),
        background=_text(obj, "background", path),
        tags=tags,
        extra={k: v for k, v in obj.items() if k not in _PAIR_KEYS},
    )


def batch_from_dict(doc: Any) -> PromptBatch:
    if not isinstance(doc, dict):
        raise PromptSchemaError("$", "expected object")
    meta = _text(doc, "meta_prompt_id", "$")
    raw = doc.get("pairs")
    if not isinstance(raw, list):
        raise PromptSchemaError("pairs", "missing or not a list")
    if not raw:
        raise PromptSchemaError("pairs", "batch must contain at least one pair")
    pairs, seen = [], set()
    for i, item in enumerate(raw):
        pair = _parse_pair(item, f"pairs[{i}]")
        if pair.id in seen:
            raise PromptSchemaError(f"pairs[{i}].id", f"duplicate id {pair.id!r}")
        seen.add(pair.id)
        pairs.append(pair)
    return PromptBatch(meta, tuple(pairs), {k: v for k, v in doc.items() if k not in _BATCH_KEYS})


def parse_prompt_batch(document: str | bytes) -> PromptBatch:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise PromptSchemaError("$", f"invalid JSON: {exc.msg}") from exc
    return batch_from_dict(doc)


def serialize_prompt_batch(batch: PromptBatch) -> str:
    return json.dumps(batch.to_dict(), indent=2, ensure_ascii=False) + "\n"


class PromptPool:
    """Batches keyed by meta-prompt id plus per-pair draw counters.

    Mutations go through one lock (single writer); reads of the batch mapping
    need no lock because batches are immutable once added.
    """

    def __init__(self, batches: Iterable[PromptBatch] = (), counters: Mapping[str, int] | None = None):
        self.batches: dict[str, PromptBatch] = {}
        self._pairs: dict[str, PromptPair] = {}
        self.counters: dict[str, int] = {}
        self._lock = threading.Lock()
        for b in batches:
            self.add_batch(b)
        for key, n in (counters or {}).items():
            if key not in self._pairs:
                raise KeyError(f"counter for unknown pair {key!r}")
            if n < 0:
                raise ValueError(f"negative counter for {key!r}")
            self.counters[key] = int(n)

    def add_batch(self, batch: PromptBatch) -> None:
        with self._lock:
            if batch.meta_prompt_id in self.batches:
                raise ValueError(f"batch {batch.meta_prompt_id!r} already in pool")
            clash = [p.id for p in batch.pairs if p.id in self._pairs]
            if clash:
                raise ValueError(f"pair ids already in pool: {clash[:5]}")
            self.batches[batch.meta_prompt_id] = batch
            for p in batch.pairs:
                self._pairs[p.id] = p
                self.counters[p.id] = 0

    def __len__(self) -> int:
        return len(self._pairs)

    def pairs(self) -> list[PromptPair]:
        return list(self._pairs.values())

    def usage(self) -> dict[str, int]:
        return dict(self.counters)

    def sample(self, rng_seed: int) -> PromptPair:
        with self._lock:
            if not self._pairs:
                raise EmptyPoolError("prompt pool is empty")
            low = min(self.counters.values())
            candidates = sorted(k for k, n in self.counters.items() if n == low)
            choice = random.Random(rng_seed).choice(candidates)
            self.counters[choice] += 1
            return self._pairs[choice]

    def save(self, root: str | os.PathLike) -> None:
        root = Path(root)
        (root / "batches").mkdir(parents=True, exist_ok=True)
        with self._lock:
            for meta, batch in self.batches.items():
                _atomic_write(root / "batches" / f"{_safe_name(meta)}.json", serialize_prompt_batch(batch))
            _atomic_write(root / "counters.json", json.dumps(self.counters, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root: str | os.PathLike) -> "PromptPool":
        root = Path(root)
        batches = [parse_prompt_batch(p.read_text("utf-8")) for p in sorted((root / "batches").glob("*.json"))]
        counters_path = root / "counters.json"
        counters = json.loads(counters_path.read_text("utf-8")) if counters_path.exists() else None
        return cls(batches, counters)


def sample_prompt(pool: PromptPool, rng_seed: int) -> PromptPair:
    return pool.sample(rng_seed)


def _safe_name(name: str) -> str:
    keep = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
    if keep != name:
        keep += "-" + hashlib.sha256(name.encode()).hexdigest()[:8]
    return keep


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}.{threading.get_ident()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# Vocabulary for the offline client. Combinations are drawn from a hash of the
# meta prompt, so identical meta prompts give identical batches.
_WEATHER = ("clear", "overcast", "light rain", "after a storm", "foggy", "snow flurries", "hazy")
_TIME = ("dawn", "morning", "noon", "afternoon", "golden hour", "dusk", "night")
_LIGHT = ("soft diffuse light", "hard shadows", "warm lamplight", "neon reflections", "backlit glare",
          "dappled shade")
_SITE = ("a cobbled old-town square", "a temple courtyard", "a university campus", "a harbour promenade",
         "a mountain village", "an industrial yard", "a botanical garden", "a subway entrance")
_MATERIAL = ("weathered concrete", "polished marble", "mossy sandstone", "painted steel", "oak planks",
             "terracotta tiles", "rough basalt", "glazed ceramic", "rusted iron grating", "brushed granite")
_DETAIL = ("with chipped edges", "streaked with water stains", "scattered with fallen leaves",
           "with faded paint markings", "worn smooth in the middle", "with thin cracks")


class OfflinePromptClient:
    """Deterministic stand-in for a language model."""

    name = "offline"

    def complete(self, meta_prompt: str) -> str:
        h = hashlib.sha256(meta_prompt.encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(h[:8], "big"))
        lo, hi = BATCH_SIZE_RANGE
        n = rng.randint(lo, hi)
        tag = h.hex()[:10]
        pairs = []
        for i in range(n):
            weather, time_, light, site = (rng.choice(_WEATHER), rng.choice(_TIME), rng.choice(_LIGHT),
                                           rng.choice(_SITE))
            pairs.append({
                "id": f"{tag}-{i:03d}",
                "foreground": f"{rng.choice(_MATERIAL).capitalize()} {rng.choice(_DETAIL)}.",
                "background": f"{site.capitalize()[0]}{site[1:]} at {time_}, {weather}, {light}.",
                "tags": [weather, time_, light, site],
            })
        return json.dumps({"meta_prompt_id": f"meta-{tag}", "pairs": pairs}, ensure_ascii=False)


class ChatCompletionClient:
    """Chat-completion style HTTP endpoint returning a JSON batch as message content."""

    name = "remote"

    def __init__(self, endpoint: str | None = None, token: str | None = None, model: str | None = None,
                 timeout: float = 60.0, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint or os.environ.get(PROMPT_URL_ENV)
        if not self.endpoint:
            raise PromptTransportError(f"no endpoint given and {PROMPT_URL_ENV} is unset")
        self.token = token if token is not None else os.environ.get(PROMPT_TOKEN_ENV)
        self.model = model or os.environ.get(PROMPT_MODEL_ENV, "gpt-4o-mini")
        self.timeout = timeout
        self.transport = transport

    def complete(self, meta_prompt: str) -> str:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": meta_prompt}],
            "response_format": {"type": "json_object"},
        }
        try:
            with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                resp = client.post(self.endpoint, json=body, headers=headers)
                resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise PromptTransportError(f"prompt endpoint failed: {exc}") from exc
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            log.error("malformed chat reply: %s", resp.text)
            raise MalformedReplyError("reply has no choices[0].message.content", resp.text) from exc


def request_prompt_batch(client, meta_prompt: str) -> PromptBatch:
    reply = client.complete(meta_prompt)
    try:
        batch = parse_prompt_batch(reply)
    except PromptSchemaError as exc:
        log.error("malformed prompt batch (%s); reply follows verbatim:\n%s", exc, reply)
        raise MalformedReplyError(str(exc), reply) from exc
    lo, hi = BATCH_SIZE_RANGE
    if not lo <= len(batch) <= hi:
        log.warning("batch %s has %d pairs, outside the usual %d-%d", batch.meta_prompt_id, len(batch), lo, hi)
    return batch


def mean_pairwise_distance(vectors: Mapping[str, Sequence[float]] | np.ndarray) -> float:
    """Mean Euclidean distance over all unordered pairs of per-prompt embeddings."""
    arr = np.asarray(list(vectors.values()) if isinstance(vectors, Mapping) else vectors, dtype=np.float64)
    if len(arr) < 2:
        return 0.0
    from scipy.spatial.distance import pdist
    return float(pdist(arr).mean())
