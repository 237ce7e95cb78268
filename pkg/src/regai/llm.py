"""Chat-completion providers and structured-output handling.

Agents answer in prose but must end with a machine-readable block::

    ```scores
    {"scores": [{"criterion": "Org", "score": 4, "justification": "...",
                 "rubric_language": ["logical progression"], "record_spans": [[0, 42]]}]}
    ```

    ```critique
    VERDICT: REVISE
    - Org: the draft ignores the abrupt ending
    Anything else is kept as free text.
    ```

``[[scores]] ... [[/scores]]`` is accepted as an alternative delimiter.
When several blocks of a kind are present the last one wins.
"""

from __future__ import annotations

import enum
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence, Union

import httpx

from .domain import (
    CategoryScore,
    Critique,
    ParseError,
    Rubric,
    ScoreSet,
    ValidationError,
    Verdict,
    Violation,
    validate_scoreset,
)


class ProviderError(Exception):
    pass


class RateLimited(ProviderError):
    pass


class EmptyCompletion(ProviderError):
    pass


class BlockNotFound(ParseError):
    pass


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class ProviderKind(str, enum.Enum):
    MOCK = "MOCK"
    HTTP = "HTTP"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if not self.content:
            raise ValueError("message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role.value, "content": self.content}


@dataclass(frozen=True)
class Transcript:
    messages: tuple[ChatMessage, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        for i, m in enumerate(self.messages):
            if m.role is Role.SYSTEM and i != 0:
                raise ValueError("a system message may only open the transcript")

    def __len__(self) -> int:
        return len(self.messages)

    def append(self, role: Role | str, content: str) -> "Transcript":
        return Transcript(self.messages + (ChatMessage(Role(role), content),))

    def extend(self, messages: Iterable[ChatMessage]) -> "Transcript":
        return Transcript(self.messages + tuple(messages))

    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self.messages]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "Transcript":
        return cls(tuple(ChatMessage(Role(d["role"]), d["content"]) for d in items))

    @classmethod
    def start(cls, system: str | None, user: str | None = None) -> "Transcript":
        t = cls()
        if system:
            t = t.append(Role.SYSTEM, system)
        if user:
            t = t.append(Role.USER, user)
        return t


@dataclass(frozen=True)
class CompletionParams:
    model_id: str = "mock"
    temperature: float = 0.0
    max_output_tokens: int = 2048
    seed: int | None = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "temperature": self.temperature,
                "max_output_tokens": self.max_output_tokens, "seed": self.seed}


class Provider(Protocol):
    kind: ProviderKind

    def complete(self, transcript: Transcript, params: CompletionParams) -> ChatMessage: ...


def complete(provider: Provider, transcript: Transcript, params: CompletionParams) -> ChatMessage:
    if not transcript.messages:
        raise ProviderError("cannot complete an empty transcript")
    msg = provider.complete(transcript, params)
    if msg.role is not Role.ASSISTANT:
        raise ProviderError(f"provider returned a {msg.role.value} message")
    return msg


# -- mocks ------------------------------------------------------------------

Responder = Union[str, Callable[[Transcript, CompletionParams], str]]


class RulesMock:
    """Substring rules checked in registration order; the first match answers.

    A rule matches against the whole transcript text, or only the last
    message when ``scope="last"``. Responses may be callables of
    ``(transcript, params)`` for stateful-looking but pure behaviour.
    """

    kind = ProviderKind.MOCK

    def __init__(self, rules: Sequence[tuple[str, Responder]] = (), default: Responder | None = None, scope: str = "all"):
        if scope not in ("all", "last"):
            raise ValueError("scope must be 'all' or 'last'")
        self.rules: list[tuple[str, Responder]] = list(rules)
        self.default = default
        self.scope = scope

    def add(self, pattern: str, response: Responder) -> "RulesMock":
        self.rules.append((pattern, response))
        return self

    def complete(self, transcript: Transcript, params: CompletionParams) -> ChatMessage:
        haystack = transcript.messages[-1].content if self.scope == "last" else transcript.text()
        for pattern, response in self.rules:
            if pattern in haystack:
                return _answer(response, transcript, params)
        if self.default is not None:
            return _answer(self.default, transcript, params)
        raise ProviderError("no mock rule matched the transcript")

    def describe(self) -> dict:
        return {"kind": "mock-rules", "rules": [p for p, _ in self.rules]}


def _answer(response: Responder, transcript: Transcript, params: CompletionParams) -> ChatMessage:
    text = response(transcript, params) if callable(response) else response
    if not text:
        raise EmptyCompletion("mock produced an empty completion")
    return ChatMessage(Role.ASSISTANT, text)


class ReplayMock:
    """Returns the scripted completions in order; calls are serialized."""

    kind = ProviderKind.MOCK

    def __init__(self, script: Sequence[str]):
        self.script = list(script)
        self._next = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ReplayMock":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list) or not all(isinstance(s, str) for s in data):
            raise ValueError(f"{path}: a replay script is a JSON list of strings")
        return cls(data)

    @property
    def remaining(self) -> int:
        return len(self.script) - self._next

    def reset(self) -> None:
        with self._lock:
            self._next = 0

    def complete(self, transcript: Transcript, params: CompletionParams) -> ChatMessage:
        with self._lock:
            if self._next >= len(self.script):
                raise ProviderError(f"replay script exhausted after {len(self.script)} completions")
            text = self.script[self._next]
            self._next += 1
        if not text:
            raise EmptyCompletion(f"replay entry {self._next} is empty")
        return ChatMessage(Role.ASSISTANT, text)

    def describe(self) -> dict:
        return {"kind": "mock-replay", "length": len(self.script)}


# -- HTTP -------------------------------------------------------------------


class HttpProvider:
    """Client for a chat-completions endpoint.

    429, 5xx and transport errors are retried: ``attempts`` tries in total
    with waits of ``backoff_base * 2**i`` seconds capped at ``backoff_cap``.
    Other HTTP errors fail at once.
    """

    kind = ProviderKind.HTTP

    def __init__(
        self,
        base_url: str,
        api_key_env: str | None = None,
        max_in_flight: int = 4,
        attempts: int = 3,
        backoff_base: float = 1.0,
        backoff_cap: float = 8.0,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _headers(self) -> dict:
        if not self.api_key_env:
            return {}
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise ProviderError(f"environment variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}"}

    @staticmethod
    def request_body(transcript: Transcript, params: CompletionParams) -> dict:
        body = {
            "model": params.model_id,
            "messages": transcript.to_list(),
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        return body

    def complete(self, transcript: Transcript, params: CompletionParams) -> ChatMessage:
        body = self.request_body(transcript, params)
        headers = self._headers()
        last: ProviderError | None = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1)))
            with self._slots:
                try:
                    resp = self._client.post(self.url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = ProviderError(f"transport error: {exc}")
                    continue
            if resp.status_code == 429:
                last = RateLimited(f"rate limited (HTTP 429) after {attempt + 1} attempt(s)")
                continue
            if resp.status_code >= 500:
                last = ProviderError(f"HTTP {resp.status_code} from {self.url}")
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
            return ChatMessage(Role.ASSISTANT, _completion_text(resp))
        assert last is not None
        raise last

    def describe(self) -> dict:
        return {"kind": "http", "url": self.url}


def _completion_text(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProviderError(f"malformed completion response: {exc}") from exc
    if not content or not str(content).strip():
        raise EmptyCompletion("endpoint returned an empty completion")
    return str(content)


# -- structured blocks ------------------------------------------------------


def render_block(kind: str, content: str) -> str:
    return f"```{kind}\n{content}\n```"


def extract_block(text: str, kind: str) -> str:
    """Contents of the last closed ```kind fence or [[kind]]...[[/kind]] block."""
    fence_open = re.compile(r"```[ \t]*" + re.escape(kind) + r"[ \t]*\r?\n")
    tag_open = re.compile(r"\[\[" + re.escape(kind) + r"\]\]")
    tag_close = "[[/" + kind + "]]"
    best: tuple[int, str] | None = None
    for m in fence_open.finditer(text):
        end = text.find("```", m.end())
        if end >= 0:
            body = text[m.end():end]
            best = (m.start(), body[:-1] if body.endswith("\n") else body)
    for m in tag_open.finditer(text):
        end = text.find(tag_close, m.end())
        if end >= 0 and (best is None or m.start() > best[0]):
            best = (m.start(), text[m.end():end].strip("\n"))
    if best is None:
        raise BlockNotFound(f"no {kind!r} block in completion", raw=text)
    return best[1]


def _as_int(value, where: str, raw: str) -> int:
    if isinstance(value, bool):
        raise ParseError(f"{where}: score must be a number", raw=raw)
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and re.fullmatch(r"\s*-?\d+\s*", value):
        return int(value)
    raise ParseError(f"{where}: score {value!r} is not an integer", raw=raw)


def parse_scoreset_payload(text: str, rubric: Rubric, record_id: str = "", draft_index: int = 0) -> ScoreSet:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"scores payload is not JSON: {exc.msg}", exc.lineno, exc.colno, raw=text) from exc
    if not isinstance(data, dict) or not isinstance(data.get("scores"), list):
        raise ParseError('scores payload must be an object with a "scores" list', raw=text)
    entries = []
    for i, item in enumerate(data["scores"]):
        where = f"scores[{i}]"
        if not isinstance(item, dict):
            raise ParseError(f"{where} is not an object", raw=text)
        try:
            name = item["criterion"]
            score = _as_int(item["score"], where, text)
            spans = tuple((int(a), int(b)) for a, b in item.get("record_spans", []) or [])
            entries.append(CategoryScore(
                str(name), score, str(item.get("justification", "")),
                tuple(str(q) for q in item.get("rubric_language", []) or []), spans,
            ))
        except KeyError as exc:
            raise ParseError(f"{where} lacks {exc.args[0]!r}", raw=text) from exc
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}", raw=text) from exc
    draft = ScoreSet(record_id, rubric.id, tuple(entries), 0, draft_index)
    problems = [v for v in validate_scoreset(draft, rubric) if v.path]
    if problems:
        raise ValidationError(problems)
    return ScoreSet.build(record_id, rubric, entries, draft_index)


def render_scoreset_payload(s: ScoreSet) -> str:
    return json.dumps({"scores": [
        {
            "criterion": e.criterion_name,
            "score": e.score,
            "justification": e.justification,
            "rubric_language": list(e.cited_rubric_language),
            "record_spans": [list(sp) for sp in e.cited_record_spans],
        }
        for e in s.entries
    ]}, ensure_ascii=False, indent=1)


_VERDICT = re.compile(r"^\s*VERDICT\s*:\s*(\w+)\s*$", re.IGNORECASE)
_ITEM = re.compile(r"^\s*[-*]\s*([^:\n]+?)\s*:\s*(.+?)\s*$")


def parse_critique_payload(text: str) -> Critique:
    """Read ``VERDICT: PASS|REVISE``, ``- Criterion: feedback`` items and free text.

    Item lines under a PASS verdict are kept as free text.
    """
    verdict: Verdict | None = None
    items: list[tuple[str, str]] = []
    free: list[str] = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        m = _VERDICT.match(line)
        if m:
            if verdict is not None:
                raise ParseError("more than one VERDICT line", lineno, raw=text)
            try:
                verdict = Verdict(m.group(1).upper())
            except ValueError:
                raise ParseError(f"verdict {m.group(1)!r} is neither PASS nor REVISE", lineno, raw=text) from None
            continue
        m = _ITEM.match(line)
        if m:
            items.append((m.group(1), m.group(2)))
        elif line.strip():
            free.append(line.strip())
    if verdict is None:
        raise ParseError("critique has no VERDICT line", raw=text)
    if verdict is Verdict.PASS:
        free = [ln.strip() for ln in text.split("\n") if ln.strip() and not _VERDICT.match(ln)]
        items = []
    elif not items:
        raise ParseError("a REVISE verdict needs at least one '- Criterion: feedback' item", raw=text)
    return Critique(verdict, tuple(items), "\n".join(free))


def render_critique_payload(c: Critique) -> str:
    lines = [f"VERDICT: {c.verdict.value}"]
    lines += [f"- {crit}: {fb}" for crit, fb in c.items]
    if c.free_text:
        lines.append(c.free_text)
    return "\n".join(lines)


def check_critique_criteria(c: Critique, rubric: Rubric) -> list[Violation]:
    """Items that name criteria the rubric does not have."""
    return [Violation(crit, "not a rubric criterion") for crit, _ in c.items if crit not in rubric.names]
