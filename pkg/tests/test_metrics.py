from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats

from regai.metrics import (
    DegenerateAgreementDenominator,
    LengthMismatch,
    MetricsError,
    MetricsReport,
    OutOfRange,
    TestKind,
    ZeroVariance,
    anomaly_check,
    build_report,
    describe,
    mae,
    pearson,
    qwk,
    t_test,
)
from regai.special import betainc, student_t_sf2


def naive_qwk(x, y, lo, hi):
    """Dense confusion-matrix construction, the textbook way."""
    n = hi - lo + 1
    o = np.zeros((n, n))
    for a, b in zip(x, y):
        o[a - lo, b - lo] += 1
    hx = o.sum(axis=1)
    hy = o.sum(axis=0)
    e = np.outer(hx, hy) / o.sum()
    w = np.array([[(i - j) ** 2 / (n - 1) ** 2 for j in range(n)] for i in range(n)])
    return 1 - (w * o).sum() / (w * e).sum()


ints = st.lists(st.integers(1, 6), min_size=2, max_size=40)


class TestPearson:
    def test_identity(self):
        assert pearson([1, 5, 2, 8], [1, 5, 2, 8]) == pytest.approx(1.0)

    def test_anti(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_sigma_formula(self):
        x, y = [1, 2, 3, 4], [2, 1, 4, 3]
        mx, my = sum(x) / 4, sum(y) / 4
        num = sum((a - mx) * (b - my) for a, b in zip(x, y))
        den = math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))
        assert num / den == pytest.approx(0.6)
        assert pearson(x, y) == pytest.approx(num / den, rel=1e-12)

    def test_errors(self):
        with pytest.raises(ZeroVariance):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(LengthMismatch):
            pearson([1, 2], [1, 2, 3])

    @given(ints, st.floats(0.1, 10), st.floats(-5, 5), st.randoms())
    def test_affine_invariance(self, x, a, b, rnd):
        y = [rnd.randint(1, 6) for _ in x]
        assume(len(set(x)) > 1 and len(set(y)) > 1)
        assert pearson([a * v + b for v in x], y) == pytest.approx(pearson(x, y), abs=1e-9)


class TestMae:
    def test_cases(self):
        assert mae([3, 4], [3, 4]) == 0.0
        assert mae([1, 4], [2, 2]) == 1.5

    def test_naive_loop(self):
        rnd = random.Random(7)
        x = [rnd.randint(0, 60) for _ in range(100)]
        y = [rnd.randint(0, 60) for _ in range(100)]
        total = 0
        for a, b in zip(x, y):
            total += a - b if a > b else b - a
        assert mae(x, y) == pytest.approx(total / 100, rel=1e-12)

    @given(st.lists(st.tuples(st.integers(-9, 9), st.integers(-9, 9), st.integers(-9, 9)), min_size=1, max_size=20))
    def test_triangle(self, rows):
        x, y, z = zip(*rows)
        assert mae(x, z) <= mae(x, y) + mae(y, z) + 1e-12


class TestQwk:
    def test_perfect(self):
        assert qwk([1, 2, 3], [1, 2, 3], 1, 3) == 1.0

    def test_hand_case(self):
        assert qwk([1, 3], [3, 1], 1, 3) == -1.0

    def test_against_dense_oracle(self):
        rnd = random.Random(11)
        x = [rnd.randint(1, 6) for _ in range(50)]
        y = [rnd.randint(1, 6) for _ in range(50)]
        assert qwk(x, y, 1, 6) == pytest.approx(naive_qwk(x, y, 1, 6), rel=1e-12)

    def test_sklearn_style_reference(self):
        from sklearn.metrics import cohen_kappa_score

        rnd = random.Random(3)
        x = [rnd.randint(1, 6) for _ in range(80)]
        y = [min(6, max(1, v + rnd.choice((-1, 0, 0, 1)))) for v in x]
        assert qwk(x, y, 1, 6) == pytest.approx(cohen_kappa_score(x, y, weights="quadratic"), rel=1e-12)

    def test_degenerate(self):
        assert qwk([4, 4, 4], [4, 4, 4], 1, 6) == 1.0
        # both constant but different: expected disagreement is non-zero, kappa is 0
        assert qwk([2, 2], [5, 5], 1, 6) == 0.0

    def test_degenerate_single_rating_range(self):
        assert qwk([3, 3], [3, 3], 3, 3) == 1.0

    def test_errors(self):
        with pytest.raises(OutOfRange):
            qwk([1, 7], [1, 2], 1, 6)
        with pytest.raises(OutOfRange):
            qwk([1.5, 2], [1, 2], 1, 6)
        with pytest.raises(LengthMismatch):
            qwk([1], [1, 2], 1, 6)
        assert issubclass(DegenerateAgreementDenominator, MetricsError)

    @given(ints, st.randoms())
    def test_symmetric(self, x, rnd):
        y = [rnd.randint(1, 6) for _ in x]
        assume(len(set(x)) > 1 or len(set(y)) > 1 or x == y)
        assert qwk(x, y, 1, 6) == pytest.approx(qwk(y, x, 1, 6), abs=1e-12)

    @given(ints)
    def test_self_agreement(self, x):
        assert qwk(x, x, 1, 6) == pytest.approx(1.0)

    @given(ints, st.randoms(), st.integers(-20, 20))
    def test_shift_invariant(self, x, rnd, k):
        y = [rnd.randint(1, 6) for _ in x]
        assume(len(set(x)) > 1 or len(set(y)) > 1)
        shifted = qwk([v + k for v in x], [v + k for v in y], 1 + k, 6 + k)
        assert shifted == pytest.approx(qwk(x, y, 1, 6), abs=1e-12)


class TestDescribe:
    def test_small(self):
        d = describe([1, 2, 3, 4])
        assert d.mean == 2.5 and d.q50 == 2.5
        assert d.count == 4 and d.min == 1 and d.max == 4

    def test_constant(self):
        d = describe([7, 7, 7])
        assert d.std == 0
        assert d.min == d.q25 == d.q50 == d.q75 == d.max == 7

    def test_against_numpy(self):
        rnd = random.Random(5)
        x = [rnd.randint(10, 60) for _ in range(37)]
        d = describe(x)
        assert d.std == pytest.approx(np.std(x, ddof=1), rel=1e-12)
        for q, v in zip((25, 50, 75), (d.q25, d.q50, d.q75)):
            assert v == pytest.approx(np.percentile(x, q), rel=1e-12)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
    def test_quartiles_ordered(self, x):
        d = describe(x)
        assert d.min <= d.q25 <= d.q50 <= d.q75 <= d.max


class TestTTest:
    def test_identical_paired(self):
        res = t_test([1, 2, 3], [1, 2, 3], TestKind.PAIRED)
        assert res.t == 0 and res.p == 1

    def test_table_value(self):
        assert student_t_sf2(2.0, 10) == pytest.approx(0.0734, abs=1e-4)

    def test_against_scipy(self):
        rnd = random.Random(9)
        x = [rnd.gauss(36, 5) for _ in range(30)]
        y = [rnd.gauss(35, 6) for _ in range(30)]
        ref = {
            TestKind.PAIRED: stats.ttest_rel(x, y),
            TestKind.INDEPENDENT_POOLED: stats.ttest_ind(x, y),
            TestKind.INDEPENDENT_WELCH: stats.ttest_ind(x, y, equal_var=False),
        }
        for kind, r in ref.items():
            got = t_test(x, y, kind)
            assert got.t == pytest.approx(r.statistic, rel=1e-10)
            assert got.p == pytest.approx(r.pvalue, rel=1e-8)

    def test_antisymmetric(self):
        x, y = [1, 4, 2, 8, 5], [3, 3, 9, 1, 0, 4]
        for kind in (TestKind.INDEPENDENT_WELCH, TestKind.INDEPENDENT_POOLED):
            assert t_test(x, y, kind).t == pytest.approx(-t_test(y, x, kind).t)

    def test_underflow_is_zero(self):
        x = list(range(100, 600))
        y = [v - 50 + (v % 3) for v in x]
        assert t_test(x, y, TestKind.PAIRED).p == 0.0

    def test_errors(self):
        with pytest.raises(ZeroVariance):
            t_test([2, 3], [1, 2], TestKind.PAIRED)
        with pytest.raises(LengthMismatch):
            t_test([1, 2, 3], [1, 2], TestKind.PAIRED)
        with pytest.raises(LengthMismatch):
            t_test([1], [1, 2], TestKind.INDEPENDENT_WELCH)


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (5, 0.5, 0.99), (250, 0.5, 0.999), (2, 3, 0.0), (2, 3, 1.0), (30, 40, 0.45)])
def test_betainc_against_scipy(a, b, x):
    from scipy.special import betainc as ref

    assert betainc(a, b, x) == pytest.approx(ref(a, b, x), rel=1e-10, abs=1e-300)


def _three_record_report():
    vectors = {"SC": [40, 30, 50], "HRS": [38, 32, 47], "R1": [19, 16, 24], "R2": [19, 16, 23]}
    cats = {"SC": {"Org": [4, 3, 5]}, "R1": {"Org": [4, 3, 4]}}
    return build_report(vectors, cats, [("SC", "HRS"), ("R1", "R2"), ("SC", "R1")], {"SC": (10, 60), "HRS": (10, 60), "R1": (5, 30), "R2": (5, 30), "Org": (1, 6)})


class TestReport:
    def test_identical_vectors(self):
        v = [10, 20, 30, 25]
        rep = build_report({"A": v, "B": list(v)}, {"A": {"c": [1, 2, 3, 4]}, "B": {"c": [1, 2, 3, 4]}}, [("A", "B")], {})
        assert rep.overall[0].corr == pytest.approx(1) and rep.overall[0].mae == 0 and rep.overall[0].qwk == 1
        cat = rep.categories["c"][0]
        assert cat.corr == pytest.approx(1) and cat.mae == 0 and cat.qwk == 1

    def test_cells_match_operations(self):
        rep = _three_record_report()
        sc_hrs = rep.overall[0]
        assert sc_hrs.corr == pearson([40, 30, 50], [38, 32, 47])
        assert sc_hrs.mae == mae([40, 30, 50], [38, 32, 47])
        assert sc_hrs.qwk == qwk([40, 30, 50], [38, 32, 47], 10, 60)
        assert rep.overall[2].qwk == qwk([40, 30, 50], [19, 16, 24], 5, 60)
        assert list(rep.categories) == ["Org"]
        assert rep.categories["Org"][0].a == "SC" and rep.categories["Org"][0].b == "R1"
        assert rep.categories["Org"][0].qwk == qwk([4, 3, 5], [4, 3, 4], 1, 6)
        assert rep.distributions["HRS"] == describe([38, 32, 47])
        kinds = [(t.a, t.b, t.kind) for t in rep.t_tests]
        assert ("R1", "R2", "paired") in kinds and ("R1", "R2", "welch") in kinds
        row = next(t for t in rep.t_tests if (t.a, t.b, t.kind) == ("SC", "R1", "paired"))
        assert row.t == t_test([40, 30, 50], [19, 16, 24]).t

    def test_json_round_trip(self):
        rep = _three_record_report()
        again = MetricsReport.from_dict(__import__("json").loads(rep.to_json()))
        assert again.to_json() == rep.to_json()

    def test_text_layout(self):
        text = _three_record_report().render_text()
        assert "Overall metrics" in text and "SC vs HRS" in text
        assert "Score distributions" in text and "Significance tests" in text
        assert "Org" in text


class TestAnomaly:
    def _rep(self, corr, mae_, qwk_):
        from regai.metrics import PairMetrics

        return MetricsReport(overall=[PairMetrics("SC", "HRS", corr, mae_, qwk_)])

    def test_equal_no_flags(self):
        r = self._rep(0.55, 4.0, 0.5)
        assert anomaly_check(r, [r], {"corr": 0.05, "mae": 0.5, "qwk": 0.05}) == []

    def test_corr_drop(self):
        flags = anomaly_check(self._rep(0.30, 4.0, 0.5), [self._rep(0.55, 4.0, 0.5)], {"corr": 0.05})
        assert len(flags) == 1 and flags[0].metric.endswith("/corr")

    def test_only_qwk(self):
        flags = anomaly_check(
            self._rep(0.55, 4.2, 0.3), [self._rep(0.55, 4.0, 0.5)], {"corr": 0.05, "mae": 0.5, "qwk": 0.05}
        )
        assert [f.metric for f in flags] == ["overall/SC~HRS/qwk"]

    def test_baseline_mean_and_path_threshold(self):
        base = [self._rep(0.5, 4.0, 0.5), self._rep(0.6, 4.0, 0.5)]
        assert anomaly_check(self._rep(0.58, 4, 0.5), base, {"corr": 0.05}) == []
        flags = anomaly_check(self._rep(0.58, 4, 0.5), base, {"corr": 0.05, "overall/SC~HRS/corr": 0.01})
        assert len(flags) == 1

    def test_needs_baseline(self):
        with pytest.raises(MetricsError):
            anomaly_check(self._rep(0.5, 1, 0.5), [], {})
