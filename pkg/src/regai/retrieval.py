"""Exemplar knowledge bases.

Each store maps an embedded key text to a document: task descriptions to
rubrics, evaluated texts to final scores, and draft scores to critiques.
Retrieval is an exhaustive scan ranked by a composite of cosine
similarity and an optional performance score; the similarity threshold
always applies to the raw cosine.

Store file format (JSON lines, UTF-8)::

    {"format": "regai-exemplar-store", "version": 1, "kind": "SCORING_EXEMPLARS", "dim": 64}
    {"id": "scoring-000001", "key_text": ..., "value_doc": ..., "embedding": ["0x1.8p-1", ...],
     "performance": 0.9, "approved": true, "created_at": "2026-01-01T00:00:00+00:00", "metadata": {}}

Embeddings are written as ``float.hex`` strings so a load reproduces them
bit for bit.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

STORE_FORMAT = "regai-exemplar-store"
STORE_VERSION = 1


class RetrievalError(Exception):
    pass


class DimensionMismatch(RetrievalError, ValueError):
    pass


class ZeroVector(RetrievalError, ValueError):
    pass


class MissingPerformance(RetrievalError, ValueError):
    pass


class EmbeddingFailure(RetrievalError):
    pass


class FormatError(RetrievalError):
    pass


class StoreKind(str, enum.Enum):
    RUBRIC_EXEMPLARS = "RUBRIC_EXEMPLARS"
    SCORING_EXEMPLARS = "SCORING_EXEMPLARS"
    CRITIQUE_EXEMPLARS = "CRITIQUE_EXEMPLARS"

    @property
    def prefix(self) -> str:
        return self.value.split("_")[0].lower()


class Measure(str, enum.Enum):
    COSINE_ONLY = "COSINE_ONLY"
    PRODUCT = "PRODUCT"
    GEOMETRIC_MEAN = "GEOMETRIC_MEAN"


class Similarity(str, enum.Enum):
    """Similarity fed into the composite ranking; the threshold gate always uses cosine."""

    COSINE = "COSINE"
    DOT = "DOT"
    L2 = "L2"


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 1
    similarity_threshold: float = 0.7
    measure: Measure = Measure.COSINE_ONLY
    similarity: Similarity = Similarity.COSINE

    def __post_init__(self) -> None:
        object.__setattr__(self, "measure", Measure(self.measure))
        object.__setattr__(self, "similarity", Similarity(self.similarity))
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in [-1, 1]")


@dataclass(frozen=True)
class ExemplarEntry:
    id: str
    key_text: str
    value_doc: str
    embedding: tuple[float, ...]
    performance: float | None = None
    approved: bool = False
    created_at: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))
        object.__setattr__(self, "metadata", dict(self.metadata))
        norm = math.sqrt(math.fsum(v * v for v in self.embedding))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"entry {self.id!r}: embedding norm {norm} is not 1")
        if self.performance is not None and not 0.0 <= self.performance <= 1.0:
            raise ValueError(f"entry {self.id!r}: performance {self.performance} outside [0, 1]")


@dataclass(frozen=True)
class Match:
    entry: ExemplarEntry
    score: float
    similarity: float

    def __iter__(self):
        # unpacks as (entry, score)
        return iter((self.entry, self.score))


# -- embedding providers ----------------------------------------------------


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> tuple[float, ...]: ...

    def describe(self) -> dict: ...


def normalize(vec: Sequence[float]) -> tuple[float, ...]:
    arr = np.asarray(vec, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise ZeroVector("cannot normalize a zero or non-finite vector")
    return tuple(float(v) for v in arr / norm)


class HashEmbedder:
    """Deterministic offline embedding.

    The text is lower-cased, runs of whitespace collapse to one space and a
    space is added at both ends. Every character 3-gram is hashed with
    BLAKE2b (keyed by the seed); the first four digest bytes pick a
    dimension, the fifth byte's low bit picks the sign, and the +/-1
    contributions are summed and L2-normalized. If they cancel exactly the
    whole normalized text is hashed to a single dimension instead.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)

    def _bucket(self, gram: str) -> tuple[int, float]:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest()
        return int.from_bytes(h[:4], "little") % self.dim, (1.0 if h[4] & 1 else -1.0)

    def embed(self, text: str) -> tuple[float, ...]:
        if not text:
            raise EmbeddingFailure("cannot embed empty text")
        norm_text = " " + " ".join(text.lower().split()) + " "
        vec = [0.0] * self.dim
        for i in range(len(norm_text) - 2):
            idx, sign = self._bucket(norm_text[i : i + 3])
            vec[idx] += sign
        if not any(vec):
            idx, _ = self._bucket(norm_text)
            vec[idx] = 1.0
        return normalize(vec)

    def describe(self) -> dict:
        return {"kind": "hash", "dim": self.dim, "seed": self.seed}


class HttpEmbedder:
    """Embeddings endpoint client: POST ``{"model", "input": [text]}``, read ``data[0].embedding``."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str | None = None,
        dim: int | None = None,
        client: httpx.Client | None = None,
        timeout: float = 30.0,
    ):
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.api_key_env = api_key_env
        self.dim = dim or 0
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> tuple[float, ...]:
        if not text:
            raise EmbeddingFailure("cannot embed empty text")
        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if not key:
                raise EmbeddingFailure(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": [text]}, headers=headers)
            resp.raise_for_status()
            vec = resp.json()["data"][0]["embedding"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise EmbeddingFailure(f"embedding request failed: {exc}") from exc
        if self.dim and len(vec) != self.dim:
            raise EmbeddingFailure(f"expected {self.dim} dimensions, endpoint returned {len(vec)}")
        self.dim = len(vec)
        try:
            return normalize(vec)
        except ZeroVector as exc:
            raise EmbeddingFailure(str(exc)) from exc

    def describe(self) -> dict:
        return {"kind": "http", "url": self.url, "model": self.model}


# -- scoring ----------------------------------------------------------------


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    va, vb = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"dimensions differ: {va.shape[0]} vs {vb.shape[0]}")
    ma, mb = float(np.max(np.abs(va), initial=0.0)), float(np.max(np.abs(vb), initial=0.0))
    if ma == 0 or mb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    va, vb = va / ma, vb / mb
    na2, nb2 = float(va @ va), float(vb @ vb)
    # sqrt(na2 * nb2) rather than na * nb so that cos(a, a) is exactly 1.0
    return max(-1.0, min(1.0, float(va @ vb) / math.sqrt(na2 * nb2)))


def _similarity(kind: Similarity, a: Sequence[float], b: Sequence[float], cosine: float) -> float:
    if kind is Similarity.COSINE:
        return cosine
    va, vb = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if kind is Similarity.DOT:
        return float(va @ vb)
    return 1.0 / (1.0 + float(np.linalg.norm(va - vb)))


def composite_score(similarity: float, performance: float | None, measure: Measure) -> float:
    """Ranking score; similarity is clamped to [0, 1] before it is combined with performance."""
    measure = Measure(measure)
    if measure is Measure.COSINE_ONLY:
        return similarity
    if performance is None:
        raise MissingPerformance(f"{measure.value} needs a performance score")
    if performance < 0:
        raise ValueError("performance must be non-negative")
    s = min(1.0, max(0.0, similarity))
    if measure is Measure.PRODUCT:
        return s * performance
    return math.sqrt(s * performance)


# -- store ------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class ExemplarStore:
    """One knowledge base.

    Writers are serialized by a lock and replace the entry tuple wholesale,
    so :attr:`entries` is always a consistent snapshot for readers.
    """

    def __init__(
        self,
        kind: StoreKind,
        embedder: Embedder | None = None,
        entries: Iterable[ExemplarEntry] = (),
        clock: Callable[[], str] = _now,
    ):
        self.kind = StoreKind(kind)
        self.embedder = embedder
        self.clock = clock
        self._lock = threading.Lock()
        self._entries: tuple[ExemplarEntry, ...] = ()
        for e in entries:
            self._check_new(e, self._entries)
            self._entries += (e,)

    @property
    def entries(self) -> tuple[ExemplarEntry, ...]:
        return self._entries

    @property
    def dim(self) -> int | None:
        return len(self._entries[0].embedding) if self._entries else None

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExemplarStore) and (self.kind, self._entries) == (other.kind, other._entries)

    def get(self, entry_id: str) -> ExemplarEntry:
        for e in self._entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    @staticmethod
    def _check_new(e: ExemplarEntry, current: tuple[ExemplarEntry, ...]) -> None:
        if any(x.id == e.id for x in current):
            raise ValueError(f"duplicate entry id {e.id!r}")
        if current and len(current[0].embedding) != len(e.embedding):
            raise DimensionMismatch(
                f"entry {e.id!r} has {len(e.embedding)} dimensions, store has {len(current[0].embedding)}"
            )

    def _next_id(self) -> str:
        prefix = self.kind.prefix + "-"
        taken = [int(e.id[len(prefix):]) for e in self._entries if e.id.startswith(prefix) and e.id[len(prefix):].isdigit()]
        return f"{prefix}{max(taken, default=0) + 1:06d}"

    def add_entry(
        self,
        key_text: str,
        value_doc: str,
        performance: float | None = None,
        approved: bool = False,
        metadata: Mapping[str, str] | None = None,
        embedding: Sequence[float] | None = None,
    ) -> str:
        """Embed ``key_text`` and append an entry; returns the new id.

        Unapproved entries are kept for audit but never retrieved.
        """
        if not key_text:
            raise ValueError("key_text must be non-empty")
        if embedding is None:
            if self.embedder is None:
                raise EmbeddingFailure("store has no embedder")
            embedding = self.embedder.embed(key_text)
        with self._lock:
            entry = ExemplarEntry(
                self._next_id(), key_text, value_doc, tuple(embedding), performance, approved, self.clock(),
                dict(metadata or {}),
            )
            self._check_new(entry, self._entries)
            self._entries = self._entries + (entry,)
        return entry.id

    def set_approved(self, entry_id: str, approved: bool = True) -> ExemplarEntry:
        with self._lock:
            found = None
            new = []
            for e in self._entries:
                if e.id == entry_id:
                    found = e = replace(e, approved=approved)
                new.append(e)
            if found is None:
                raise KeyError(entry_id)
            self._entries = tuple(new)
        return found

    def digest(self) -> str:
        return hashlib.sha256(dumps_store(self).encode("utf-8")).hexdigest()

    def stats(self) -> dict:
        approved = sum(e.approved for e in self._entries)
        return {"kind": self.kind.value, "total": len(self._entries), "approved": approved,
                "unapproved": len(self._entries) - approved}


def _ranked(
    entries: Iterable[ExemplarEntry], query: Sequence[float], cfg: RetrievalConfig
) -> list[Match]:
    out = []
    for e in entries:
        if not e.approved:
            continue
        if len(e.embedding) != len(query):
            raise DimensionMismatch(f"query has {len(query)} dimensions, entry {e.id!r} has {len(e.embedding)}")
        cos = cosine_similarity(query, e.embedding)
        sim = _similarity(cfg.similarity, query, e.embedding, cos)
        out.append(Match(e, composite_score(sim, e.performance, cfg.measure), cos))
    out.sort(key=lambda m: (-m.score, m.entry.id))
    return out


def top_k(
    store: ExemplarStore,
    query_embedding: Sequence[float],
    cfg: RetrievalConfig,
    where: Callable[[ExemplarEntry], bool] | None = None,
) -> list[Match]:
    """Approved entries ranked by composite score (desc), ties by id (asc), at most ``cfg.k``."""
    entries = store.entries
    if where is not None:
        entries = tuple(e for e in entries if where(e))
    return _ranked(entries, query_embedding, cfg)[: cfg.k]


def select_exemplar(store: ExemplarStore, query_embedding: Sequence[float], cfg: RetrievalConfig) -> Match | None:
    """Best-ranked approved entry whose raw cosine clears the threshold, or None."""
    for m in _ranked(store.entries, query_embedding, cfg):
        if m.similarity >= cfg.similarity_threshold:
            return m
    return None


def top_k_balanced(
    store: ExemplarStore, query_embedding: Sequence[float], cfg: RetrievalConfig, tag: str = "verdict",
    values: tuple[str, str] = ("pass", "revise"),
) -> list[Match]:
    """Top-k that reserves k//2 slots for ``values[0]`` and the rest for ``values[1]``.

    Slots a group cannot fill go to the next best entries of any tag, so
    the result has ``min(k, approved)`` entries in ranking order.
    """
    ranked = _ranked(store.entries, query_embedding, cfg)
    quota = {values[0]: cfg.k // 2, values[1]: cfg.k - cfg.k // 2}
    chosen: list[Match] = []
    for m in ranked:
        v = m.entry.metadata.get(tag)
        if quota.get(v, 0) > 0:
            quota[v] -= 1
            chosen.append(m)
    for m in ranked:
        if len(chosen) >= cfg.k:
            break
        if m not in chosen:
            chosen.append(m)
    chosen.sort(key=lambda m: (-m.score, m.entry.id))
    return chosen[: cfg.k]


# -- persistence ------------------------------------------------------------


def _entry_to_json(e: ExemplarEntry) -> dict:
    return {
        "id": e.id,
        "key_text": e.key_text,
        "value_doc": e.value_doc,
        "embedding": [float.hex(v) for v in e.embedding],
        "performance": None if e.performance is None else float.hex(float(e.performance)),
        "approved": e.approved,
        "created_at": e.created_at,
        "metadata": dict(sorted(e.metadata.items())),
    }


def _entry_from_json(d: Mapping, lineno: int) -> ExemplarEntry:
    try:
        perf = d.get("performance")
        return ExemplarEntry(
            d["id"],
            d["key_text"],
            d["value_doc"],
            tuple(float.fromhex(v) for v in d["embedding"]),
            None if perf is None else float.fromhex(perf),
            bool(d["approved"]),
            d.get("created_at", ""),
            {str(k): str(v) for k, v in d.get("metadata", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"line {lineno}: bad entry: {exc}") from exc


def dumps_store(store: ExemplarStore) -> str:
    header = {"format": STORE_FORMAT, "version": STORE_VERSION, "kind": store.kind.value, "dim": store.dim}
    lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
    lines += [json.dumps(_entry_to_json(e), sort_keys=True, ensure_ascii=False) for e in store.entries]
    return "\n".join(lines) + "\n"


def loads_store(text: str, embedder: Embedder | None = None) -> ExemplarStore:
    # only "\n" separates records; str.splitlines would also break on U+2028 inside strings
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise FormatError("store file is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: header is not JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != STORE_FORMAT:
        raise FormatError("line 1: not an exemplar store header")
    version = header.get("version")
    if version != STORE_VERSION:
        raise FormatError(f"store format version {version} is not supported (this build reads version {STORE_VERSION})")
    try:
        kind = StoreKind(header["kind"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"line 1: bad store kind: {exc}") from exc
    entries = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {n}: not JSON: {exc}") from exc
        entries.append(_entry_from_json(d, n))
    try:
        return ExemplarStore(kind, embedder, entries)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_store(store: ExemplarStore, path: str | Path) -> None:
    path = Path(path)
    with store._lock:
        text = dumps_store(store)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)


def load_store(path: str | Path, embedder: Embedder | None = None) -> ExemplarStore:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RetrievalError(f"cannot read store {path}: {exc}") from exc
    return loads_store(text, embedder)
