from __future__ import annotations

import json
import random

import pytest

from regai.dataset import TRAITS, EssayRecord, TraitScores, build_set8_rubric, human_resolved, rater_overall
from regai.domain import CategoryScore, ScoreSet, scoreset_to_dict
from regai.evaluation import AlignmentError, evaluate, load_scoresets
from regai.metrics import pearson, qwk
from regai.plotting import render_figures

RUBRIC = build_set8_rubric()


def make_records(n: int, seed: int = 0) -> list[EssayRecord]:
    rng = random.Random(seed)
    out = []
    for i in range(n):
        base = rng.randint(1, 6)
        t1 = TraitScores(*(min(6, max(1, base + rng.choice((-1, 0, 0, 1)))) for _ in TRAITS))
        t2 = TraitScores(*(min(6, max(1, base + rng.choice((-1, 0, 0, 1)))) for _ in TRAITS))
        out.append(EssayRecord(1000 + i, 8, f"essay {i}", t1, t2, resolved_final=rater_overall(t1) * 2))
    return out


def system_from(records, shift: int = 0) -> dict[str, ScoreSet]:
    out = {}
    for r in records:
        entries = [CategoryScore(t, min(6, max(1, v + shift)), "because") for t, v in zip(TRAITS, r.rater1)]
        out[r.record_id] = ScoreSet.build(r.record_id, RUBRIC, entries)
    return out


def test_system_totals_are_doubled_against_hrs():
    recs = make_records(20)
    sc = system_from(recs)
    report = evaluate(recs, {"SC": sc})
    assert [(p.a, p.b) for p in report.overall] == [("SC", "HRS"), ("R1", "R2")]
    sc_vec = [2 * rater_overall(r.rater1) for r in recs]
    hrs = [human_resolved(r) for r in recs]
    row = report.overall[0]
    assert row.corr == pytest.approx(pearson(sc_vec, hrs))
    assert row.qwk == pytest.approx(qwk(sc_vec, hrs, 10, 60))
    assert report.distributions["SC"].mean == pytest.approx(sum(sc_vec) / len(sc_vec))


def test_category_reference_rater():
    recs = make_records(15)
    sc = system_from(recs)
    r1 = evaluate(recs, {"SC": sc})
    assert all(rows[0].a == "SC" and rows[0].b == "R1" and rows[0].mae == 0 for rows in r1.categories.values())
    r2 = evaluate(recs, {"SC": sc}, category_reference="R2")
    assert {rows[0].b for rows in r2.categories.values()} == {"R2"}
    with pytest.raises(ValueError):
        evaluate(recs, {"SC": sc}, category_reference="HRS")


def test_t_test_pairs_and_kinds():
    recs = make_records(12)
    report = evaluate(recs, {"SC": system_from(recs), "RO": system_from(recs, shift=1)})
    pairs = [(t.a, t.b) for t in report.t_tests]
    assert pairs[:3] == [("SC", "RO")] * 3
    assert ("SC", "R1") in pairs and ("RO", "R1") in pairs and pairs[-1] == ("R1", "R2")
    assert {t.kind for t in report.t_tests} == {"paired", "welch", "pooled"}


def test_resolved_hrs_source():
    recs = make_records(10)
    a = evaluate(recs, hrs_source="resolved")
    assert a.distributions["HRS"].mean == pytest.approx(2 * a.distributions["R1"].mean)


def test_alignment_errors_name_ids():
    recs = make_records(5)
    sc = system_from(recs)
    del sc["1002"]
    sc["9999"] = next(iter(sc.values()))
    with pytest.raises(AlignmentError) as e:
        evaluate(recs, {"SC": sc})
    assert e.value.missing == ["1002"] and e.value.extra == ["9999"]


def test_load_scoresets_round_trip_and_duplicates(tmp_path):
    recs = make_records(4)
    sc = system_from(recs)
    path = tmp_path / "s.jsonl"
    path.write_text("".join(json.dumps(scoreset_to_dict(s)) + "\n" for s in sc.values()))
    assert load_scoresets(path) == sc
    path.write_text(path.read_text() + json.dumps(scoreset_to_dict(sc["1000"])) + "\n")
    with pytest.raises(ValueError, match="appears twice"):
        load_scoresets(path)
    path.write_text("{}\n")
    with pytest.raises(ValueError, match=":1:"):
        load_scoresets(path)


def test_figures_render_and_are_stable(tmp_path):
    recs = make_records(20)
    report = evaluate(recs, {"SC": system_from(recs)})
    first = render_figures(report, tmp_path / "a")
    second = render_figures(report, tmp_path / "b")
    assert [p.name for p in first] == ["distributions.png", "category_metrics.png"]
    for a, b in zip(first, second):
        assert a.read_bytes()[:4] == b"\x89PNG"
        assert a.read_bytes() == b.read_bytes()


def test_figures_from_humans_only_report(tmp_path):
    report = evaluate(make_records(6))
    for p in render_figures(report, tmp_path):
        assert p.stat().st_size > 0
