from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import pytest

from regai.domain import Criterion, Level, Rubric

FIXTURES = Path(__file__).parent / "fixtures"


def make_criterion(name: str, weight=1, scores=range(1, 7)) -> Criterion:
    levels = tuple(Level(f"L{s}", s, f"{name} at level {s}") for s in scores)
    return Criterion(name, Fraction(weight), levels)


def make_rubric(weights: dict[str, object] | None = None, rid: str = "r1", approved: bool = True) -> Rubric:
    weights = weights or {"A": 1, "B": 2}
    return Rubric(rid, "Test rubric", "You evaluate test texts.", tuple(make_criterion(n, w) for n, w in weights.items()), approved)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def scores_reply(scores: dict[str, int], spans: dict[str, list] | None = None, prose: str = "Here are my scores.") -> str:
    import json

    from regai.llm import render_block

    spans = spans or {}
    body = json.dumps({"scores": [
        {"criterion": n, "score": s, "justification": f"The {n} evidence matches level {s}.",
         "rubric_language": [f"level {s}"], "record_spans": spans.get(n, [[0, 3]])}
        for n, s in scores.items()
    ]})
    return f"{prose}\n{render_block('scores', body)}"


def critique_reply(verdict: str, items: list[tuple[str, str]] = (), prose: str = "Review done.") -> str:
    from regai.llm import render_block

    lines = [f"VERDICT: {verdict}"] + [f"- {c}: {f}" for c, f in items]
    return f"{prose}\n{render_block('critique', chr(10).join(lines))}"
