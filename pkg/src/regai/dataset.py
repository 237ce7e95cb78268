"""ASAP essay set 8 ingestion and trait-to-total arithmetic.

The public distribution (``training_set_rel3.tsv``) is tab-delimited with a
header row. For set 8 the six trait columns ``raterN_trait1..6`` hold, in
order, ideas & content, organization, voice, word choice, sentence fluency
and conventions, each scored 1..6. ``domain1_score`` holds the resolved
final score. The file is not UTF-8 clean; lines that fail to decode are
read as cp1252 (falling back to latin-1) and the record is flagged.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

from .domain import Rubric, parse_rubric

log = logging.getLogger(__name__)

TRAITS = ("I&C", "Org", "Voice", "WC", "SF", "Conv")
COUNTED_WEIGHTS = {"I&C": 1, "Org": 1, "Voice": 0, "WC": 0, "SF": 1, "Conv": 2}

Column = Union[str, int]


class DatasetError(Exception):
    pass


class MappingError(DatasetError):
    pass


class RowError(DatasetError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class TraitScores(NamedTuple):
    ic: int
    org: int
    voice: int
    wc: int
    sf: int
    conv: int

    def as_dict(self) -> dict[str, int]:
        return dict(zip(TRAITS, self))

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> "TraitScores":
        return cls(*(int(d[t]) for t in TRAITS))


@dataclass(frozen=True)
class EssayRecord:
    essay_id: int
    essay_set: int
    body: str
    rater1: TraitScores
    rater2: TraitScores
    rater3: TraitScores | None = None
    resolved_final: int | None = None
    encoding_fallback: bool = False

    @property
    def record_id(self) -> str:
        return str(self.essay_id)


@dataclass(frozen=True)
class ColumnMapping:
    """Where each field lives; columns are header names or 0-based indexes."""

    delimiter: str = "\t"
    essay_id: Column = "essay_id"
    essay_set: Column = "essay_set"
    body: Column = "essay"
    rater1: tuple[Column, ...] = tuple(f"rater1_trait{i}" for i in range(1, 7))
    rater2: tuple[Column, ...] = tuple(f"rater2_trait{i}" for i in range(1, 7))
    rater3: tuple[Column, ...] | None = tuple(f"rater3_trait{i}" for i in range(1, 7))
    resolved_final: Column | None = "domain1_score"

    def __post_init__(self) -> None:
        for name in ("rater1", "rater2"):
            if len(getattr(self, name)) != 6:
                raise MappingError(f"{name} must map exactly six trait columns")
        if self.rater3 is not None and len(self.rater3) != 6:
            raise MappingError("rater3 must map exactly six trait columns")
        if len(self.delimiter) != 1:
            raise MappingError("delimiter must be a single character")


ASAP_MAPPING = ColumnMapping()


def rater_overall(t: TraitScores) -> int:
    """Per-rater total out of 30: I&C + Org + SF + 2 * Conv (voice and word choice do not count)."""
    return t.ic + t.org + t.sf + 2 * t.conv


def combined_final(r1: TraitScores, r2: TraitScores) -> int:
    return rater_overall(r1) + rater_overall(r2)


def human_resolved(record: EssayRecord, source: str = "combined") -> int:
    """The human reference total out of 60.

    ``source="combined"`` sums the two raters; ``"resolved"`` uses the
    distribution's resolved column when present and falls back to the sum.
    """
    if source == "resolved" and record.resolved_final is not None:
        return record.resolved_final
    if source not in ("combined", "resolved"):
        raise ValueError(f"unknown HRS source {source!r}")
    return combined_final(record.rater1, record.rater2)


def first_n(records: Sequence[EssayRecord], n: int) -> list[EssayRecord]:
    if n < 0:
        raise ValueError("n must be non-negative")
    return list(records[:n])


def build_set8_rubric() -> Rubric:
    text = resources.files("regai").joinpath("data/set8_rubric.txt").read_text(encoding="utf-8")
    return parse_rubric(text)


def _decode(raw: bytes) -> tuple[str, set[int]]:
    """Decode file bytes; returns the text and the 1-based lines that needed a fallback codec."""
    try:
        return raw.decode("utf-8-sig"), set()
    except UnicodeDecodeError:
        pass
    parts, fallback = [], set()
    for n, chunk in enumerate(raw.splitlines(keepends=True), start=1):
        try:
            parts.append(chunk.decode("utf-8"))
        except UnicodeDecodeError:
            fallback.add(n)
            try:
                parts.append(chunk.decode("cp1252"))
            except UnicodeDecodeError:
                parts.append(chunk.decode("latin-1"))
    text = "".join(parts)
    return text.removeprefix("\ufeff"), fallback


def _resolve(col: Column, header: list[str], what: str) -> int:
    if isinstance(col, int):
        if col >= len(header):
            raise MappingError(f"{what}: column index {col} beyond {len(header)} columns")
        return col
    try:
        return header.index(col)
    except ValueError:
        raise MappingError(f"{what}: no column named {col!r}") from None


def parse_dataset(
    path: str | Path,
    mapping: ColumnMapping = ASAP_MAPPING,
    *,
    essay_set: int | None = 8,
    strict: bool = False,
    problems: list[RowError] | None = None,
) -> list[EssayRecord]:
    """Read essay records in file order.

    Rows from other essay sets are skipped. Malformed rows raise
    :class:`RowError` in strict mode; otherwise they are logged, appended
    to ``problems`` when given, and skipped.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    text, fallback_lines = _decode(raw)
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=mapping.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        return []
    idx_id = _resolve(mapping.essay_id, header, "essay_id")
    idx_set = _resolve(mapping.essay_set, header, "essay_set")
    idx_body = _resolve(mapping.body, header, "body")
    idx_r1 = [_resolve(c, header, "rater1") for c in mapping.rater1]
    idx_r2 = [_resolve(c, header, "rater2") for c in mapping.rater2]
    idx_r3 = None
    if mapping.rater3 is not None and all(isinstance(c, int) or c in header for c in mapping.rater3):
        idx_r3 = [_resolve(c, header, "rater3") for c in mapping.rater3]
    idx_res = None
    if mapping.resolved_final is not None and (
        isinstance(mapping.resolved_final, int) or mapping.resolved_final in header
    ):
        idx_res = _resolve(mapping.resolved_final, header, "resolved_final")

    records: list[EssayRecord] = []
    line_start = reader.line_num + 1
    for row in reader:
        line = line_start
        line_start = reader.line_num + 1
        if not any(cell.strip() for cell in row):
            continue
        try:
            if essay_set is not None and _int_cell(row, idx_set, line, "essay_set") != essay_set:
                continue
            rec = _row_to_record(row, idx_id, idx_set, idx_body, idx_r1, idx_r2, idx_r3, idx_res, line)
        except RowError as exc:
            if strict:
                raise
            log.warning("skipping %s", exc)
            if problems is not None:
                problems.append(exc)
            continue
        if any(n in fallback_lines for n in range(line, line_start)):
            rec = replace(rec, encoding_fallback=True)
        records.append(rec)
    return records


def _int_cell(row: list[str], i: int, line: int, what: str) -> int:
    if i >= len(row):
        raise RowError(line, f"missing {what} column")
    cell = row[i].strip()
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        value = float(cell)
    except ValueError:
        value = float("nan")
    if not value.is_integer():
        raise RowError(line, f"{what} is not an integer: {cell!r}")
    return int(value)


def _traits(row: list[str], idx: list[int], line: int, who: str) -> TraitScores:
    vals = []
    for trait, i in zip(TRAITS, idx):
        v = _int_cell(row, i, line, f"{who} {trait}")
        if not 1 <= v <= 6:
            raise RowError(line, f"{who} {trait} = {v} outside 1..6")
        vals.append(v)
    return TraitScores(*vals)


def _row_to_record(row, idx_id, idx_set, idx_body, idx_r1, idx_r2, idx_r3, idx_res, line) -> EssayRecord:
    essay_id = _int_cell(row, idx_id, line, "essay_id")
    essay_set = _int_cell(row, idx_set, line, "essay_set")
    if idx_body >= len(row):
        raise RowError(line, "missing essay column")
    body = row[idx_body]
    if not body.strip():
        raise RowError(line, "empty essay text")
    r1 = _traits(row, idx_r1, line, "rater1")
    r2 = _traits(row, idx_r2, line, "rater2")
    r3 = None
    if idx_r3 is not None and all(i < len(row) and row[i].strip() for i in idx_r3):
        r3 = _traits(row, idx_r3, line, "rater3")
    resolved = None
    if idx_res is not None and idx_res < len(row) and row[idx_res].strip():
        resolved = _int_cell(row, idx_res, line, "resolved_final")
    return EssayRecord(essay_id, essay_set, body, r1, r2, r3, resolved)


def write_dataset(records: Iterable[EssayRecord], path: str | Path, delimiter: str = "\t") -> None:
    """Write records in the ASAP column layout (only the columns this harness reads)."""
    header = ["essay_id", "essay_set", "essay", "domain1_score"]
    for r in (1, 2, 3):
        header += [f"rater{r}_trait{i}" for i in range(1, 7)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            row = [rec.essay_id, rec.essay_set, rec.body, "" if rec.resolved_final is None else rec.resolved_final]
            row += list(rec.rater1) + list(rec.rater2)
            row += list(rec.rater3) if rec.rater3 is not None else [""] * 6
            w.writerow(row)
