from __future__ import annotations

import itertools

import pytest

from regai.dataset import (
    ColumnMapping,
    DatasetError,
    MappingError,
    RowError,
    TraitScores,
    build_set8_rubric,
    combined_final,
    first_n,
    human_resolved,
    parse_dataset,
    rater_overall,
    write_dataset,
)
from regai.domain import CategoryScore, ScoreSet, render_rubric, parse_rubric, weighted_total


def test_fixture_parses(fixtures_dir):
    recs = parse_dataset(fixtures_dir / "set8_sample.tsv")
    assert [r.essay_id for r in recs] == [20716, 20717, 20718, 20719, 20720]
    assert all(r.essay_set == 8 for r in recs)
    first = recs[0]
    assert first.rater1 == TraitScores(4, 4, 4, 4, 4, 4)
    assert first.rater2 == TraitScores(4, 3, 4, 4, 3, 4)
    assert first.rater3 is None
    assert first.resolved_final == 37
    assert recs[2].rater3 == TraitScores(5, 5, 5, 5, 5, 5)
    assert first.body.startswith("The day my little brother")


def test_other_sets_kept_when_unfiltered(fixtures_dir):
    recs = parse_dataset(fixtures_dir / "set8_sample.tsv", essay_set=None, strict=False)
    # the set-1 row has no trait scores, so it is malformed for this harness
    assert len(recs) == 5


def test_bad_trait_strict_and_lenient(tmp_path, fixtures_dir):
    lines = (fixtures_dir / "set8_sample.tsv").read_text().splitlines()
    cells = lines[3].split("\t")
    cells[7] = "9"
    lines[3] = "\t".join(cells)
    path = tmp_path / "bad.tsv"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RowError) as exc:
        parse_dataset(path, strict=True)
    assert exc.value.line == 4
    assert "line 4" in str(exc.value)
    problems: list[RowError] = []
    recs = parse_dataset(path, problems=problems)
    assert len(recs) == 4
    assert [p.line for p in problems] == [4]


def test_empty_file(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("")
    assert parse_dataset(path) == []


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        parse_dataset(tmp_path / "nope.tsv")


def test_mapping_errors(fixtures_dir):
    with pytest.raises(MappingError):
        parse_dataset(fixtures_dir / "set8_sample.tsv", ColumnMapping(body="text"))
    with pytest.raises(MappingError):
        ColumnMapping(rater1=("a", "b"))


def test_index_mapping(fixtures_dir):
    mapping = ColumnMapping(
        essay_id=0, essay_set=1, body=2,
        rater1=tuple(range(7, 13)), rater2=tuple(range(13, 19)), rater3=None, resolved_final=None,
    )
    recs = parse_dataset(fixtures_dir / "set8_sample.tsv", mapping)
    assert recs[1].rater1 == TraitScores(2, 2, 3, 2, 2, 2)
    assert recs[1].resolved_final is None


def test_lossy_encoding_flagged(tmp_path, fixtures_dir):
    raw = (fixtures_dir / "set8_sample.tsv").read_bytes()
    raw = raw.replace(b"porch, I learned", b"porch\x92 I learned")
    path = tmp_path / "latin.tsv"
    path.write_bytes(raw)
    recs = parse_dataset(path)
    assert recs[0].encoding_fallback
    assert "porch’ I learned" in recs[0].body
    assert not recs[1].encoding_fallback


def test_round_trip(tmp_path, fixtures_dir):
    recs = parse_dataset(fixtures_dir / "set8_sample.tsv")
    out = tmp_path / "out.tsv"
    write_dataset(recs, out)
    again = parse_dataset(out)
    assert again == recs
    write_dataset(again, tmp_path / "out2.tsv")
    assert (tmp_path / "out2.tsv").read_bytes() == out.read_bytes()


def test_quoted_body_round_trip(tmp_path, fixtures_dir):
    recs = parse_dataset(fixtures_dir / "set8_sample.tsv")
    odd = recs[0].__class__(**{**recs[0].__dict__, "body": 'She said "ha!"\tthen\nlaughed'})
    write_dataset([odd], tmp_path / "q.tsv")
    assert parse_dataset(tmp_path / "q.tsv") == [odd]


class TestArithmetic:
    def test_rater_overall(self):
        assert rater_overall(TraitScores(6, 6, 6, 6, 6, 6)) == 30
        assert rater_overall(TraitScores(1, 1, 1, 1, 1, 1)) == 5
        assert rater_overall(TraitScores(4, 4, 3, 3, 4, 4)) == 20

    def test_combined_final(self):
        six = TraitScores(*[6] * 6)
        one = TraitScores(*[1] * 6)
        assert combined_final(six, six) == 60
        assert combined_final(one, one) == 10
        assert combined_final(TraitScores(4, 4, 3, 3, 4, 4), TraitScores(4, 3, 1, 1, 4, 3)) == 37

    def test_exhaustive_range(self):
        totals = {
            rater_overall(TraitScores(a, b, 3, 3, c, d)) for a, b, c, d in itertools.product(range(1, 7), repeat=4)
        }
        assert min(totals) == 5 and max(totals) == 30

    def test_hrs_source(self, fixtures_dir):
        rec = parse_dataset(fixtures_dir / "set8_sample.tsv")[0]
        assert human_resolved(rec) == 38
        assert human_resolved(rec, "resolved") == 37


def test_first_n(fixtures_dir):
    recs = parse_dataset(fixtures_dir / "set8_sample.tsv")
    assert first_n(recs, 0) == []
    assert first_n(recs, 99) == recs
    assert [r.essay_id for r in first_n(recs, 2)] == [20716, 20717]
    with pytest.raises(ValueError):
        first_n(recs, -1)


class TestSet8Rubric:
    def test_shape(self):
        r = build_set8_rubric()
        assert r.names == ("I&C", "Org", "Voice", "WC", "SF", "Conv")
        assert all(c.scores == (1, 2, 3, 4, 5, 6) for c in r.criteria)
        assert [c.weight for c in r.criteria] == [1, 1, 0, 0, 1, 2]
        assert parse_rubric(render_rubric(r)) == r

    def _total(self, r, scores):
        return weighted_total(
            ScoreSet.build("x", r, [CategoryScore(n, s, "j") for n, s in zip(r.names, scores)]), r
        )

    def test_max_total(self):
        r = build_set8_rubric()
        assert self._total(r, [6] * 6) == 30

    def test_voice_not_counted(self):
        r = build_set8_rubric()
        assert self._total(r, [3, 3, 1, 2, 3, 3]) == self._total(r, [3, 3, 6, 2, 3, 3])

    def test_matches_rater_overall(self):
        r = build_set8_rubric()
        for traits in itertools.product((1, 4, 6), repeat=6):
            assert self._total(r, traits) == rater_overall(TraitScores(*traits))
