"""Rubrics, score sets and critiques.

All types here are immutable values. Rubrics carry weights on criteria and
point scores on levels, so the scoring algebra does not care whether a
rendered table puts criteria in rows or columns.

Rubric text format
------------------

``render_rubric`` emits (and ``parse_rubric`` reads back)::

    %regai-rubric 1
    id: set8
    title: Essay set 8
    domain_note: You are an LLM assistant that creates rubrics for ...
    approved: false

    ## Ideas and Content | weight: 1
    | label | score | descriptor |
    | --- | --- | --- |
    | Inadequate | 1 | Ideas are missing or unclear. |
    ...

Header values and table cells escape ``\\`` ``|`` newline, carriage return
and tab as ``\\\\`` ``\\|`` ``\\n`` ``\\r`` ``\\t`` and any other
whitespace character as ``\\uXXXX``. A space at either end of a value is
written as ``\\`` followed by a space so it survives cell trimming.
Weights are written as exact fractions (``2``, ``1/2``).

``parse_rubric`` also accepts the loose markdown tables that language
models tend to produce; see :func:`parse_rubric`.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

FORMAT_TAG = "%regai-rubric"
FORMAT_VERSION = 1


class RubricError(Exception):
    pass


class ParseError(RubricError):
    """Text could not be read as a rubric.

    ``raw`` holds the offending text when it came from a model completion,
    so a human can repair it.
    """

    def __init__(self, message: str, line: int | None = None, column: int | None = None, raw: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.raw = raw
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class ValidationError(RubricError, ValueError):
    def __init__(self, violations: Sequence["Violation"] | Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class InvalidEdit(RubricError, ValueError):
    pass


class NotFound(RubricError, LookupError):
    pass


class MissingCriterion(RubricError, LookupError):
    pass


class UnknownCriterion(RubricError, LookupError):
    pass


@dataclass(frozen=True)
class Level:
    label: str
    score: int
    descriptor: str


@dataclass(frozen=True)
class Criterion:
    name: str
    weight: Fraction
    levels: tuple[Level, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", Fraction(self.weight))
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def scores(self) -> tuple[int, ...]:
        return tuple(level.score for level in self.levels)

    def level(self, label: str) -> Level:
        for level in self.levels:
            if level.label == label:
                return level
        raise NotFound(f"criterion {self.name!r} has no level {label!r}")


@dataclass(frozen=True)
class Rubric:
    id: str
    title: str
    domain_note: str
    criteria: tuple[Criterion, ...]
    approved: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "criteria", tuple(self.criteria))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.criteria)

    def criterion(self, name: str) -> Criterion:
        for c in self.criteria:
            if c.name == name:
                return c
        raise NotFound(f"rubric {self.id!r} has no criterion {name!r}")

    def digest(self) -> str:
        return hashlib.sha256(render_rubric(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RecordText:
    id: str
    body: str

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError(f"record {self.id!r} has an empty body")


@dataclass(frozen=True)
class CategoryScore:
    criterion_name: str
    score: int
    justification: str
    cited_rubric_language: tuple[str, ...] = ()
    cited_record_spans: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if not self.justification.strip():
            raise ValueError(f"empty justification for {self.criterion_name!r}")
        object.__setattr__(self, "cited_rubric_language", tuple(self.cited_rubric_language))
        object.__setattr__(
            self, "cited_record_spans", tuple((int(a), int(b)) for a, b in self.cited_record_spans)
        )


@dataclass(frozen=True)
class ScoreSet:
    record_id: str
    rubric_id: str
    entries: tuple[CategoryScore, ...]
    weighted_total: Fraction
    draft_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "weighted_total", Fraction(self.weighted_total))

    @classmethod
    def build(
        cls, record_id: str, rubric: Rubric, entries: Iterable[CategoryScore], draft_index: int = 0
    ) -> "ScoreSet":
        """Order entries by the rubric and compute the weighted total."""
        by_name = {e.criterion_name: e for e in entries}
        _check_coverage(by_name, rubric)
        ordered = tuple(by_name[name] for name in rubric.names)
        total = sum((rubric.criterion(e.criterion_name).weight * e.score for e in ordered), Fraction(0))
        return cls(record_id, rubric.id, ordered, total, draft_index)

    def score_of(self, criterion_name: str) -> int:
        for e in self.entries:
            if e.criterion_name == criterion_name:
                return e.score
        raise MissingCriterion(criterion_name)

    def scores(self) -> dict[str, int]:
        return {e.criterion_name: e.score for e in self.entries}


class Verdict(str, enum.Enum):
    PASS = "PASS"
    REVISE = "REVISE"


@dataclass(frozen=True)
class Critique:
    verdict: Verdict
    items: tuple[tuple[str, str], ...] = ()
    free_text: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "verdict", Verdict(self.verdict))
        object.__setattr__(self, "items", tuple((str(c), str(f)) for c, f in self.items))
        if self.verdict is Verdict.REVISE and not self.items:
            raise ValueError("a REVISE critique needs at least one item")
        if self.verdict is Verdict.PASS and self.items:
            raise ValueError("a PASS critique carries no revision items")


# -- validation -------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}" if self.path else self.message


def validate_rubric(r: Rubric) -> list[Violation]:
    """Every structural problem in ``r``; an empty list means valid.

    Weights may be zero ("scored but not counted") but at least one must be
    positive.
    """
    out: list[Violation] = []
    if not r.criteria:
        out.append(Violation("", "rubric has no criteria"))
        return out
    seen: set[str] = set()
    for c in r.criteria:
        path = f"criteria[{c.name}]"
        if not c.name.strip():
            out.append(Violation(path, "criterion name is empty"))
        if c.name in seen:
            out.append(Violation(path, f"duplicate criterion name {c.name!r}"))
        seen.add(c.name)
        if c.weight < 0:
            out.append(Violation(path, f"negative weight {c.weight}"))
        if len(c.levels) < 2:
            out.append(Violation(path, f"needs at least 2 levels, has {len(c.levels)}"))
        scores = c.scores
        if any(b <= a for a, b in zip(scores, scores[1:])):
            out.append(Violation(path, f"scores not strictly increasing: {list(scores)}"))
        labels: set[str] = set()
        for level in c.levels:
            lpath = f"{path}.levels[{level.label}]"
            if level.label in labels:
                out.append(Violation(lpath, f"duplicate level label {level.label!r}"))
            labels.add(level.label)
            if not level.descriptor.strip():
                out.append(Violation(lpath, "descriptor is empty"))
    if all(c.weight <= 0 for c in r.criteria):
        out.append(Violation("", "at least one criterion weight must be positive"))
    return out


def ensure_valid(r: Rubric) -> Rubric:
    violations = validate_rubric(r)
    if violations:
        raise ValidationError(violations)
    return r


def _check_coverage(by_name: Mapping[str, object], rubric: Rubric) -> None:
    missing = [n for n in rubric.names if n not in by_name]
    if missing:
        raise MissingCriterion(f"no score for criteria {missing}")
    extra = sorted(n for n in by_name if n not in rubric.names)
    if extra:
        raise UnknownCriterion(f"scores for unknown criteria {extra}")


def weighted_total(s: ScoreSet, r: Rubric) -> Fraction:
    """Sum of weight times score over the rubric's criteria."""
    by_name: dict[str, CategoryScore] = {}
    for e in s.entries:
        by_name[e.criterion_name] = e
    _check_coverage(by_name, r)
    return sum((c.weight * by_name[c.name].score for c in r.criteria), Fraction(0))


def validate_scoreset(s: ScoreSet, r: Rubric) -> list[Violation]:
    out: list[Violation] = []
    names = [e.criterion_name for e in s.entries]
    for name in r.names:
        if name not in names:
            out.append(Violation(name, "missing score"))
    for e in s.entries:
        if e.criterion_name not in r.names:
            out.append(Violation(e.criterion_name, "unknown criterion"))
            continue
        if names.count(e.criterion_name) > 1:
            out.append(Violation(e.criterion_name, "scored more than once"))
        legal = r.criterion(e.criterion_name).scores
        if e.score not in legal:
            out.append(Violation(e.criterion_name, f"score {e.score} is not one of the levels {list(legal)}"))
    if not out and s.weighted_total != weighted_total(s, r):
        out.append(Violation("", "weighted_total does not match the rubric weights"))
    return out


# -- edits ------------------------------------------------------------------


@dataclass(frozen=True)
class AddCriterion:
    name: str
    levels: tuple[Level, ...]
    weight: Fraction = Fraction(1)
    position: int | None = None


@dataclass(frozen=True)
class RemoveCriterion:
    name: str


@dataclass(frozen=True)
class AddLevel:
    criterion: str
    level: Level


@dataclass(frozen=True)
class RemoveLevel:
    criterion: str
    label: str


@dataclass(frozen=True)
class SetWeight:
    criterion: str
    weight: Fraction


@dataclass(frozen=True)
class SetLevelScore:
    criterion: str
    label: str
    score: int


@dataclass(frozen=True)
class EditDescriptor:
    criterion: str
    label: str
    descriptor: str


RubricEdit = Union[AddCriterion, RemoveCriterion, AddLevel, RemoveLevel, SetWeight, SetLevelScore, EditDescriptor]

_EDIT_KINDS = {
    cls.__name__: cls
    for cls in (AddCriterion, RemoveCriterion, AddLevel, RemoveLevel, SetWeight, SetLevelScore, EditDescriptor)
}


def _replace_criterion(r: Rubric, name: str, new: Criterion | None) -> Rubric:
    r.criterion(name)
    crits = []
    for c in r.criteria:
        if c.name != name:
            crits.append(c)
        elif new is not None:
            crits.append(new)
    return replace(r, criteria=tuple(crits))


def apply_edit(r: Rubric, e: RubricEdit) -> Rubric:
    """Return a new rubric with ``e`` applied; ``r`` is left untouched.

    Level score changes re-sort the criterion's levels by score. Any edit
    whose result would not validate raises :class:`InvalidEdit`.
    """
    if isinstance(e, AddCriterion):
        if e.name in r.names:
            raise InvalidEdit(f"criterion {e.name!r} already exists")
        crits = list(r.criteria)
        new = Criterion(e.name, Fraction(e.weight), tuple(e.levels))
        crits.insert(len(crits) if e.position is None else e.position, new)
        out = replace(r, criteria=tuple(crits))
    elif isinstance(e, RemoveCriterion):
        out = _replace_criterion(r, e.name, None)
    elif isinstance(e, AddLevel):
        c = r.criterion(e.criterion)
        levels = sorted(c.levels + (e.level,), key=lambda lv: lv.score)
        out = _replace_criterion(r, c.name, replace(c, levels=tuple(levels)))
    elif isinstance(e, RemoveLevel):
        c = r.criterion(e.criterion)
        c.level(e.label)
        levels = tuple(lv for lv in c.levels if lv.label != e.label)
        out = _replace_criterion(r, c.name, replace(c, levels=levels))
    elif isinstance(e, SetWeight):
        c = r.criterion(e.criterion)
        out = _replace_criterion(r, c.name, replace(c, weight=Fraction(e.weight)))
    elif isinstance(e, SetLevelScore):
        c = r.criterion(e.criterion)
        c.level(e.label)
        levels = [replace(lv, score=int(e.score)) if lv.label == e.label else lv for lv in c.levels]
        levels.sort(key=lambda lv: lv.score)
        out = _replace_criterion(r, c.name, replace(c, levels=tuple(levels)))
    elif isinstance(e, EditDescriptor):
        c = r.criterion(e.criterion)
        c.level(e.label)
        levels = tuple(replace(lv, descriptor=e.descriptor) if lv.label == e.label else lv for lv in c.levels)
        out = _replace_criterion(r, c.name, replace(c, levels=levels))
    else:
        raise TypeError(f"not a rubric edit: {e!r}")
    violations = validate_rubric(out)
    if violations:
        raise InvalidEdit("; ".join(map(str, violations)))
    return out


def apply_edits(r: Rubric, edits: Iterable[RubricEdit]) -> Rubric:
    for e in edits:
        r = apply_edit(r, e)
    return r


def _level_from_dict(d: Mapping) -> Level:
    return Level(str(d["label"]), int(d["score"]), str(d["descriptor"]))


def edit_from_dict(d: Mapping) -> RubricEdit:
    """Build an edit from its JSON form, e.g. ``{"kind": "SetWeight", "criterion": "Conv", "weight": 2}``."""
    d = dict(d)
    try:
        cls = _EDIT_KINDS[d.pop("kind")]
    except KeyError as exc:
        raise InvalidEdit(f"unknown or missing edit kind in {d!r}") from exc
    if "weight" in d:
        d["weight"] = parse_weight(str(d["weight"]))
    if "levels" in d:
        d["levels"] = tuple(_level_from_dict(x) for x in d["levels"])
    if "level" in d:
        d["level"] = _level_from_dict(d["level"])
    try:
        return cls(**d)
    except TypeError as exc:
        raise InvalidEdit(f"bad fields for {cls.__name__}: {exc}") from exc


# -- rendering & parsing ----------------------------------------------------

_ESCAPES = {"\\": "\\\\", "|": "\\|", "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {"\\": "\\", "|": "|", "n": "\n", "r": "\r", "t": "\t", " ": " "}


def _escape_char(ch: str) -> str:
    if ch in _ESCAPES:
        return _ESCAPES[ch]
    if ch.isspace() and ch != " ":
        return f"\\u{ord(ch):04x}"
    return ch


def _escape(text: str) -> str:
    body = "".join(_escape_char(ch) for ch in text)
    # protect edge spaces from cell trimming
    lead = len(body) - len(body.lstrip(" "))
    if lead == len(body):
        return "\\ " * lead
    trail = len(body) - len(body.rstrip(" "))
    return "\\ " * lead + body[lead : len(body) - trail] + "\\ " * trail


def _split_cells(line: str, lineno: int) -> list[str]:
    """Split on unescaped pipes, trim unescaped whitespace, unescape."""
    cells: list[list[tuple[str, bool]]] = [[]]
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == "\\" and line[i + 1 : i + 2] == "u":
            code = line[i + 2 : i + 6]
            if len(code) != 4 or not all(c in "0123456789abcdefABCDEF" for c in code):
                raise ParseError(f"bad unicode escape {line[i:i + 6]!r}", lineno, i + 1)
            cells[-1].append((chr(int(code, 16)), True))
            i += 6
            continue
        if ch == "\\":
            if i + 1 >= len(line) or line[i + 1] not in _UNESCAPES:
                raise ParseError(f"bad escape sequence {line[i:i + 2]!r}", lineno, i + 1)
            cells[-1].append((_UNESCAPES[line[i + 1]], True))
            i += 2
            continue
        if ch == "|":
            cells.append([])
        else:
            cells[-1].append((ch, False))
        i += 1
    out = []
    for cell in cells:
        while cell and not cell[0][1] and cell[0][0].isspace():
            cell.pop(0)
        while cell and not cell[-1][1] and cell[-1][0].isspace():
            cell.pop()
        out.append("".join(ch for ch, _ in cell))
    return out


def format_weight(w: Fraction) -> str:
    return str(Fraction(w))


def parse_weight(text: str) -> Fraction:
    t = text.strip().lower().lstrip("x×").strip()
    if t.endswith("%"):
        return Fraction(t[:-1].strip()) / 100
    return Fraction(t)


def render_rubric(r: Rubric) -> str:
    lines = [
        f"{FORMAT_TAG} {FORMAT_VERSION}",
        f"id: {_escape(r.id)}",
        f"title: {_escape(r.title)}",
        f"domain_note: {_escape(r.domain_note)}",
        f"approved: {'true' if r.approved else 'false'}",
    ]
    for c in r.criteria:
        lines += ["", f"## {_escape(c.name)} | weight: {format_weight(c.weight)}"]
        lines += ["| label | score | descriptor |", "| --- | --- | --- |"]
        for lv in c.levels:
            lines.append(f"| {_escape(lv.label)} | {lv.score} | {_escape(lv.descriptor)} |")
    return "\n".join(lines) + "\n"


def _parse_native(lines: list[str]) -> Rubric:
    head = lines[0].split()
    if len(head) != 2 or not head[1].isdigit():
        raise ParseError("malformed format header", 1)
    if int(head[1]) != FORMAT_VERSION:
        raise ParseError(f"unsupported rubric format version {head[1]} (this build reads {FORMAT_VERSION})", 1)
    meta: dict[str, str] = {}
    criteria: list[Criterion] = []
    current: dict | None = None

    def close() -> None:
        if current is not None:
            criteria.append(Criterion(current["name"], current["weight"], tuple(current["levels"])))

    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("## "):
            close()
            cells = _split_cells(line[3:], n)
            if len(cells) != 2 or not cells[1].startswith("weight:"):
                raise ParseError("criterion header must read '## <name> | weight: <w>'", n)
            try:
                weight = parse_weight(cells[1][len("weight:"):])
            except (ValueError, ZeroDivisionError) as exc:
                raise ParseError(f"bad weight {cells[1]!r}", n) from exc
            current = {"name": cells[0], "weight": weight, "levels": [], "header_seen": 0}
            continue
        if line.lstrip().startswith("|"):
            if current is None:
                raise ParseError("table row outside a criterion section", n)
            if current["header_seen"] < 2:
                current["header_seen"] += 1
                continue
            cells = _split_cells(line.strip(), n)
            if len(cells) != 5 or cells[0] or cells[-1]:
                raise ParseError("level row must have exactly three cells", n)
            try:
                score = int(cells[2])
            except ValueError as exc:
                raise ParseError(f"level score {cells[2]!r} is not an integer", n) from exc
            current["levels"].append(Level(cells[1], score, cells[3]))
            continue
        if current is None and ":" in line:
            key, _, value = line.partition(":")
            key = key.strip()
            if key not in ("id", "title", "domain_note", "approved"):
                raise ParseError(f"unknown header field {key!r}", n)
            meta[key] = _split_cells(value, n)[0] if key != "approved" else value.strip()
            continue
        raise ParseError(f"unexpected line {line[:40]!r}", n)
    close()
    if "id" not in meta:
        raise ParseError("missing id field", 1)
    approved = meta.get("approved", "false").lower()
    if approved not in ("true", "false"):
        raise ParseError(f"approved must be true or false, got {approved!r}")
    return Rubric(
        meta["id"], meta.get("title", ""), meta.get("domain_note", ""), tuple(criteria), approved == "true"
    )


_CRIT_HEADERS = ("criterion", "criteria", "category", "trait", "dimension", "attribute")


def _plain(cell: str) -> str:
    return cell.replace("**", "").replace("__", "").strip()


def _table_blocks(lines: list[str]) -> list[tuple[int, list[list[str]]]]:
    blocks: list[tuple[int, list[list[str]]]] = []
    current: list[list[str]] = []
    start = 0
    for n, line in enumerate(lines, start=1):
        s = line.strip()
        if s.startswith("|"):
            if not current:
                start = n
            cells = [_plain(c) for c in s.strip("|").split("|")]
            if all(re.fullmatch(r":?-{2,}:?", c) for c in cells if c) and any(cells):
                continue
            current.append(cells)
        elif current:
            blocks.append((start, current))
            current = []
    if current:
        blocks.append((start, current))
    return blocks


def _score_from_header(h: str) -> tuple[str, int | None]:
    m = re.search(r"\((-?\d+)\s*(?:pts?|points?)?\)", h) or re.match(r"^(-?\d+)\b", h) or re.search(
        r"\b(-?\d+)\s*(?:pts?|points?)?$", h
    )
    if not m:
        return h, None
    label = (h[: m.start()] + h[m.end():]).strip(" -:–")
    return label or m.group(1), int(m.group(1))


def _parse_markdown(text: str, lines: list[str]) -> Rubric:
    blocks = _table_blocks(lines)
    if not blocks:
        raise ParseError("no rubric table found", 1)
    start, rows = blocks[0]
    header = [h.lower() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise ParseError("rubric table has no rows", start)

    def col(*names: str) -> int | None:
        for i, h in enumerate(header):
            if any(h.startswith(nm) for nm in names):
                return i
        return None

    ci = col(*_CRIT_HEADERS)
    if ci is None:
        ci = 0
    wi = col("weight")
    di = col("descriptor", "description")
    crit_rows: dict[str, dict] = {}
    order: list[str] = []

    def bucket(name: str, weight_cell: str | None, lineno: int) -> dict:
        if name not in crit_rows:
            crit_rows[name] = {"weight": None, "levels": []}
            order.append(name)
        b = crit_rows[name]
        if weight_cell and b["weight"] is None:
            try:
                b["weight"] = parse_weight(weight_cell)
            except (ValueError, ZeroDivisionError) as exc:
                raise ParseError(f"bad weight {weight_cell!r}", lineno) from exc
        return b

    if di is not None:
        # long form: one row per (criterion, level)
        li = col("level", "label", "rating", "performance")
        si = col("score", "points", "pts")
        last = None
        for off, cells in enumerate(body, start=1):
            lineno = start + off + 1
            cells = cells + [""] * (len(header) - len(cells))
            name = cells[ci] or last
            if not name:
                raise ParseError("row has no criterion", lineno)
            last = name
            b = bucket(name, cells[wi] if wi is not None else None, lineno)
            score = None
            if si is not None and cells[si]:
                try:
                    score = int(Fraction(cells[si]))
                except ValueError as exc:
                    raise ParseError(f"bad score {cells[si]!r}", lineno) from exc
            label = cells[li] if li is not None else ""
            b["levels"].append([label, score, cells[di]])
    else:
        # wide form: one row per criterion, one column per level
        level_cols = [i for i in range(len(header)) if i not in (ci, wi)]
        parsed = [_score_from_header(rows[0][i]) for i in level_cols]
        have_scores = all(s is not None for _, s in parsed)
        for off, cells in enumerate(body, start=1):
            lineno = start + off + 1
            cells = cells + [""] * (len(header) - len(cells))
            b = bucket(cells[ci], cells[wi] if wi is not None else None, lineno)
            for k, i in enumerate(level_cols):
                label, score = parsed[k]
                b["levels"].append([label, score if have_scores else None, cells[i]])

    criteria = []
    for name in order:
        b = crit_rows[name]
        levels = b["levels"]
        if any(s is None for _, s, _ in levels):
            for k, lv in enumerate(levels, start=1):
                lv[1] = k
        levels.sort(key=lambda lv: lv[1])
        built = tuple(Level(lbl or str(s), s, d) for lbl, s, d in levels)
        criteria.append(Criterion(name, b["weight"] if b["weight"] is not None else Fraction(1), built))

    meta: dict[str, str] = {}
    for line in lines[: start - 1]:
        m = re.match(r"^\s*(id|title|domain_note)\s*:\s*(.*)$", line)
        if m:
            meta.setdefault(m.group(1), m.group(2).strip())
        elif line.startswith("#") and "title" not in meta:
            meta["title"] = line.lstrip("#").strip()
    rid = meta.get("id") or "rubric-" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
    return Rubric(rid, meta.get("title", ""), meta.get("domain_note", ""), tuple(criteria))


def parse_rubric(text: str) -> Rubric:
    """Read a rubric from text.

    Accepts the native format written by :func:`render_rubric` and, as a
    fallback, the first markdown table in ``text``. Markdown tables may be
    long form (a criterion column, a descriptor column, optional level,
    score and weight columns; a blank criterion cell continues the row
    above) or wide form (one row per criterion, one column per level, with
    level scores read from headers such as ``Excellent (4)``). Missing
    weights default to 1; missing level scores to 1..N in table order.
    """
    lines = text.splitlines()
    first = next((i for i, ln in enumerate(lines) if ln.strip()), None)
    if first is None:
        raise ParseError("empty rubric text", 1)
    if lines[first].startswith(FORMAT_TAG):
        try:
            rubric = _parse_native(lines[first:])
        except ParseError as exc:
            if exc.line is not None:
                exc.line += first
            raise
    else:
        rubric = _parse_markdown(text, lines)
    return ensure_valid(rubric)


# -- explainability ---------------------------------------------------------


class Highlight(NamedTuple):
    criterion_name: str
    span: tuple[int, int]
    quoted_text: str | None


def highlight_spans(s: ScoreSet, record: RecordText) -> tuple[list[Highlight], list[Highlight]]:
    """Resolve cited spans to the quoted record text.

    Spans are half-open byte offsets into the UTF-8 body. Returns
    ``(valid, invalid)``; a span is invalid when it is reversed, out of
    bounds, or cuts through a multi-byte character.
    """
    if s.record_id != record.id:
        raise ValueError(f"score set is for record {s.record_id!r}, not {record.id!r}")
    raw = record.body.encode("utf-8")
    valid: list[Highlight] = []
    invalid: list[Highlight] = []
    for e in s.entries:
        for start, end in e.cited_record_spans:
            if not 0 <= start <= end <= len(raw):
                invalid.append(Highlight(e.criterion_name, (start, end), None))
                continue
            try:
                quoted = raw[start:end].decode("utf-8")
            except UnicodeDecodeError:
                invalid.append(Highlight(e.criterion_name, (start, end), None))
                continue
            valid.append(Highlight(e.criterion_name, (start, end), quoted))
    return valid, invalid


def scoreset_to_dict(s: ScoreSet) -> dict:
    return {
        "record_id": s.record_id,
        "rubric_id": s.rubric_id,
        "draft_index": s.draft_index,
        "weighted_total": format_weight(s.weighted_total),
        "entries": [
            {
                "criterion": e.criterion_name,
                "score": e.score,
                "justification": e.justification,
                "rubric_language": list(e.cited_rubric_language),
                "record_spans": [list(sp) for sp in e.cited_record_spans],
            }
            for e in s.entries
        ],
    }


def scoreset_from_dict(d: Mapping) -> ScoreSet:
    entries = tuple(
        CategoryScore(
            e["criterion"],
            int(e["score"]),
            e["justification"],
            tuple(e.get("rubric_language", ())),
            tuple(tuple(sp) for sp in e.get("record_spans", ())),
        )
        for e in d["entries"]
    )
    return ScoreSet(
        str(d["record_id"]), d["rubric_id"], entries, Fraction(d["weighted_total"]), int(d.get("draft_index", 0))
    )


def critique_to_dict(c: Critique) -> dict:
    return {"verdict": c.verdict.value, "items": [list(i) for i in c.items], "free_text": c.free_text}
