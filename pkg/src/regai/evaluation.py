"""Benchmark harness: human raters and system runs on the essay data.

Overall comparisons put system totals on the two-rater scale (x2, out of
60) against the human-resolved score; category comparisons put each
system's criterion scores against one reference rater. The raters are
compared with each other on their own totals out of 30.
"""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import TRAITS, EssayRecord, TraitScores, human_resolved, rater_overall
from .domain import ScoreSet, scoreset_from_dict
from .metrics import MetricsReport, TestKind, build_report

SYSTEM_SCALE = 2
ALL_KINDS = (TestKind.PAIRED, TestKind.INDEPENDENT_WELCH, TestKind.INDEPENDENT_POOLED)


class AlignmentError(ValueError):
    def __init__(self, label: str, missing: Sequence[str], extra: Sequence[str]):
        self.label = label
        self.missing = list(missing)
        self.extra = list(extra)
        parts = []
        if self.missing:
            parts.append(f"missing ids {self.missing}")
        if self.extra:
            parts.append(f"unexpected ids {self.extra}")
        super().__init__(f"{label}: " + "; ".join(parts))


def load_scoresets(path: str | Path) -> dict[str, ScoreSet]:
    """Read a JSON-lines file of score sets keyed by record id."""
    out: dict[str, ScoreSet] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            s = scoreset_from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: not a score set: {exc}") from exc
        if s.record_id in out:
            raise ValueError(f"{path}:{lineno}: record {s.record_id} appears twice")
        out[s.record_id] = s
    return out


def _as_number(v: Fraction) -> int | float:
    return int(v) if v.denominator == 1 else float(v)


def _check_aligned(label: str, ids: Sequence[str], scores: Mapping[str, ScoreSet]) -> None:
    want = set(ids)
    missing = [i for i in ids if i not in scores]
    extra = sorted(k for k in scores if k not in want)
    if missing or extra:
        raise AlignmentError(label, missing, extra)


def evaluate(
    records: Sequence[EssayRecord],
    systems: Mapping[str, Mapping[str, ScoreSet]] | None = None,
    *,
    hrs_source: str = "combined",
    category_reference: str = "R1",
    t_test_kinds: Sequence[TestKind] = ALL_KINDS,
) -> MetricsReport:
    """Full metrics report for the raters and any number of system runs.

    ``systems`` maps a label such as ``SC`` or ``RO`` to score sets keyed
    by record id; every record must be scored exactly once.
    """
    systems = dict(systems or {})
    if category_reference not in ("R1", "R2"):
        raise ValueError("category_reference must be R1 or R2")
    ids = [r.record_id for r in records]
    for label, scores in systems.items():
        _check_aligned(label, ids, scores)

    vectors: dict[str, list] = {
        "R1": [rater_overall(r.rater1) for r in records],
        "R2": [rater_overall(r.rater2) for r in records],
        "HRS": [human_resolved(r, hrs_source) for r in records],
    }
    categories: dict[str, dict[str, list[int]]] = {
        "R1": {t: [getattr(r.rater1, f) for r in records] for t, f in zip(TRAITS, TraitScores._fields)},
        "R2": {t: [getattr(r.rater2, f) for r in records] for t, f in zip(TRAITS, TraitScores._fields)},
    }
    # system totals are doubled onto the HRS scale, so HRS's range covers them in every system~HRS pair
    ranges: dict[str, tuple[int, int]] = {"R1": (5, 30), "R2": (5, 30), "HRS": (10, 60)}
    ranges.update({t: (1, 6) for t in TRAITS})
    for label, scores in systems.items():
        ordered = [scores[i] for i in ids]
        vectors[label] = [_as_number(s.weighted_total * SYSTEM_SCALE) for s in ordered]
        categories[label] = {t: [s.score_of(t) for s in ordered] for t in TRAITS if all(t in s.scores() for s in ordered)}

    labels = list(systems)
    pairs = [(s, "HRS") for s in labels] + [("R1", "R2")]
    category_pairs = [(s, category_reference) for s in labels] + [("R1", "R2")]
    t_pairs = [(a, b) for i, a in enumerate(labels) for b in labels[i + 1:]]
    t_pairs += [(s, "R1") for s in labels] + [("R1", "R2")]
    return build_report(vectors, categories, pairs, ranges, t_test_pairs=t_pairs, t_test_kinds=t_test_kinds,
                        category_pairs=category_pairs)
