"""Agreement statistics and the evaluation report.

Pearson correlation, mean absolute error, quadratic-weighted kappa,
descriptive statistics and t-tests, assembled into a :class:`MetricsReport`
that exports to JSON and to fixed-width text tables.
"""

from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

from .special import student_t_sf2

REPORT_VERSION = 1


class MetricsError(ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class ZeroVariance(MetricsError):
    pass


class OutOfRange(MetricsError):
    pass


class DegenerateAgreementDenominator(MetricsError):
    pass


def _check_lengths(x: Sequence, y: Sequence, minimum: int) -> None:
    if len(x) != len(y):
        raise LengthMismatch(f"lengths differ: {len(x)} vs {len(y)}")
    if len(x) < minimum:
        raise LengthMismatch(f"need at least {minimum} values, got {len(x)}")


def _mean(x: Sequence[float]) -> float:
    return math.fsum(x) / len(x)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    _check_lengths(x, y, 2)
    mx, my = _mean(x), _mean(y)
    dx = [a - mx for a in x]
    dy = [b - my for b in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("pearson correlation is undefined for a constant vector")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def mae(x: Sequence[float], y: Sequence[float]) -> float:
    _check_lengths(x, y, 1)
    return math.fsum(abs(a - b) for a, b in zip(x, y)) / len(x)


def qwk(x: Sequence[int], y: Sequence[int], min_rating: int, max_rating: int) -> float:
    """Quadratic-weighted Cohen's kappa between two integer raters.

    The expected matrix is the outer product of the two marginal
    histograms scaled to the observed total. When both raters give the same
    single rating to everything the ratio is 0/0; that case returns 1.0.
    """
    _check_lengths(x, y, 1)
    if max_rating < min_rating:
        raise OutOfRange(f"empty rating range {min_rating}..{max_rating}")
    for v in (*x, *y):
        if v != int(v) or not min_rating <= v <= max_rating:
            raise OutOfRange(f"rating {v!r} not an integer in {min_rating}..{max_rating}")
    n_cat = max_rating - min_rating + 1
    n = len(x)
    observed = Counter((int(a) - min_rating, int(b) - min_rating) for a, b in zip(x, y))
    hist_x = Counter(int(a) - min_rating for a in x)
    hist_y = Counter(int(b) - min_rating for b in y)
    scale = (n_cat - 1) ** 2 or 1
    num = math.fsum(((i - j) ** 2 / scale) * c for (i, j), c in observed.items())
    den = math.fsum(((i - j) ** 2 / scale) * hx * hy / n for i, hx in hist_x.items() for j, hy in hist_y.items())
    if den == 0:
        if list(x) == list(y):
            return 1.0
        raise DegenerateAgreementDenominator("expected disagreement is zero")
    return 1.0 - num / den


class Distribution(NamedTuple):
    count: int
    mean: float
    std: float
    min: float
    q25: float
    q50: float
    q75: float
    max: float


def quantile(sorted_x: Sequence[float], q: float) -> float:
    """Linear interpolation between closest ranks (position q * (n - 1))."""
    pos = q * (len(sorted_x) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_x) - 1)
    frac = pos - lo
    return sorted_x[lo] + (sorted_x[hi] - sorted_x[lo]) * frac


def describe(x: Sequence[float]) -> Distribution:
    if not x:
        raise MetricsError("describe needs at least one value")
    s = sorted(x)
    n = len(s)
    m = _mean(s)
    std = math.sqrt(math.fsum((v - m) ** 2 for v in s) / (n - 1)) if n > 1 else float("nan")
    return Distribution(n, m, std, s[0], quantile(s, 0.25), quantile(s, 0.5), quantile(s, 0.75), s[-1])


class TestKind(str, enum.Enum):
    INDEPENDENT_WELCH = "welch"
    INDEPENDENT_POOLED = "pooled"
    PAIRED = "paired"

    __test__ = False


class TTest(NamedTuple):
    t: float
    p: float
    df: float
    kind: TestKind


def _var(x: Sequence[float], m: float) -> float:
    return math.fsum((v - m) ** 2 for v in x) / (len(x) - 1)


def t_test(x: Sequence[float], y: Sequence[float], kind: TestKind = TestKind.PAIRED) -> TTest:
    """Two-sided t-test of equal means."""
    kind = TestKind(kind)
    if len(x) < 2 or len(y) < 2:
        raise LengthMismatch("t-test needs at least two values per sample")
    if kind is TestKind.PAIRED:
        _check_lengths(x, y, 2)
        d = [a - b for a, b in zip(x, y)]
        n = len(d)
        md = _mean(d)
        vd = _var(d, md)
        df = n - 1
        if vd == 0:
            if md == 0:
                return TTest(0.0, 1.0, df, kind)
            raise ZeroVariance("paired differences are constant and non-zero")
        t = md / math.sqrt(vd / n)
    else:
        nx, ny = len(x), len(y)
        mx, my = _mean(x), _mean(y)
        vx, vy = _var(x, mx), _var(y, my)
        if vx == 0 and vy == 0:
            if mx == my:
                return TTest(0.0, 1.0, nx + ny - 2, kind)
            raise ZeroVariance("both samples are constant with different means")
        if kind is TestKind.INDEPENDENT_POOLED:
            df = nx + ny - 2
            sp2 = ((nx - 1) * vx + (ny - 1) * vy) / df
            t = (mx - my) / math.sqrt(sp2 * (1 / nx + 1 / ny))
        else:
            sx, sy = vx / nx, vy / ny
            t = (mx - my) / math.sqrt(sx + sy)
            df = (sx + sy) ** 2 / (sx**2 / (nx - 1) + sy**2 / (ny - 1))
    return TTest(t, student_t_sf2(t, df), df, kind)


# -- reports ----------------------------------------------------------------


@dataclass
class PairMetrics:
    a: str
    b: str
    corr: float | None
    mae: float
    qwk: float | None


@dataclass
class TTestRow:
    a: str
    b: str
    kind: str
    t: float | None
    p: float | None
    df: float | None


@dataclass
class MetricsReport:
    overall: list[PairMetrics] = field(default_factory=list)
    categories: dict[str, list[PairMetrics]] = field(default_factory=dict)
    distributions: dict[str, Distribution] = field(default_factory=dict)
    t_tests: list[TTestRow] = field(default_factory=list)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "overall": [asdict(p) for p in self.overall],
            "categories": {c: [asdict(p) for p in rows] for c, rows in self.categories.items()},
            "distributions": {k: _nan_to_none(d._asdict()) for k, d in self.distributions.items()},
            "t_tests": [asdict(t) for t in self.t_tests],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        if d.get("version") != REPORT_VERSION:
            raise MetricsError(f"report version {d.get('version')!r} is not {REPORT_VERSION}")
        return cls(
            overall=[PairMetrics(**p) for p in d["overall"]],
            categories={c: [PairMetrics(**p) for p in rows] for c, rows in d["categories"].items()},
            distributions={
                k: Distribution(**{m: float("nan") if x is None else x for m, x in v.items()})
                for k, v in d["distributions"].items()
            },
            t_tests=[TTestRow(**t) for t in d["t_tests"]],
        )

    def flatten(self) -> dict[str, float]:
        """Every numeric cell keyed by a slash path such as ``overall/R1~R2/qwk``."""
        out: dict[str, float] = {}
        for p in self.overall:
            for m in ("corr", "mae", "qwk"):
                out[f"overall/{p.a}~{p.b}/{m}"] = getattr(p, m)
        for cat, rows in self.categories.items():
            for p in rows:
                for m in ("corr", "mae", "qwk"):
                    out[f"category/{cat}/{p.a}~{p.b}/{m}"] = getattr(p, m)
        for label, dist in self.distributions.items():
            for m, v in dist._asdict().items():
                out[f"distribution/{label}/{m}"] = v
        for t in self.t_tests:
            out[f"ttest/{t.a}~{t.b}/{t.kind}/t"] = t.t
            out[f"ttest/{t.a}~{t.b}/{t.kind}/p"] = t.p
        return {k: v for k, v in out.items() if v is not None and not (isinstance(v, float) and math.isnan(v))}

    def render_text(self) -> str:
        return render_report_text(self)


def _nan_to_none(d: dict) -> dict:
    return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in d.items()}


def _pair_metrics(a: str, b: str, x: Sequence[float], y: Sequence[float], rng: tuple[int, int] | None) -> PairMetrics:
    try:
        corr = pearson(x, y)
    except ZeroVariance:
        corr = None
    lo, hi = rng if rng is not None else (min(*x, *y), max(*x, *y))
    try:
        k = qwk(x, y, int(lo), int(hi))
    except (OutOfRange, DegenerateAgreementDenominator):
        k = None
    return PairMetrics(a, b, corr, mae(x, y), k)


def _range_for(keys: Sequence[str], ranges: Mapping[str, tuple[int, int]]) -> tuple[int, int] | None:
    found = [ranges[k] for k in keys if k in ranges]
    if not found:
        return None
    return min(r[0] for r in found), max(r[1] for r in found)


def build_report(
    vectors: Mapping[str, Sequence[float]],
    category_vectors: Mapping[str, Mapping[str, Sequence[int]]],
    pairs: Sequence[tuple[str, str]],
    rating_ranges: Mapping[str, tuple[int, int]],
    *,
    t_test_pairs: Sequence[tuple[str, str]] | None = None,
    t_test_kinds: Sequence[TestKind] = (TestKind.PAIRED, TestKind.INDEPENDENT_WELCH),
    category_pairs: Sequence[tuple[str, str]] | None = None,
) -> MetricsReport:
    """Assemble the full report.

    ``vectors`` maps a label (``SC``, ``R1``, ``HRS`` ...) to overall scores;
    ``category_vectors`` maps a label to per-category scores. A pair's QWK
    range is the union of the ranges given for its two labels (or for the
    category), falling back to the observed min/max. ``category_pairs`` and
    ``t_test_pairs`` default to ``pairs``.
    """
    report = MetricsReport()
    for a, b in pairs:
        rng = _range_for((a, b), rating_ranges)
        report.overall.append(_pair_metrics(a, b, vectors[a], vectors[b], rng))
    cats: list[str] = []
    for label in category_vectors.values():
        cats += [c for c in label if c not in cats]
    for cat in cats:
        rows = []
        for a, b in category_pairs if category_pairs is not None else pairs:
            if a in category_vectors and b in category_vectors:
                if cat in category_vectors[a] and cat in category_vectors[b]:
                    rng = _range_for((cat,), rating_ranges)
                    rows.append(_pair_metrics(a, b, category_vectors[a][cat], category_vectors[b][cat], rng))
        if rows:
            report.categories[cat] = rows
    for label, values in vectors.items():
        report.distributions[label] = describe(values)
    for a, b in t_test_pairs if t_test_pairs is not None else pairs:
        for kind in t_test_kinds:
            kind = TestKind(kind)
            try:
                res = t_test(vectors[a], vectors[b], kind)
                report.t_tests.append(TTestRow(a, b, kind.value, res.t, res.p, res.df))
            except MetricsError:
                report.t_tests.append(TTestRow(a, b, kind.value, None, None, None))
    return report


def _fmt(v: float | None, width: int = 10, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a".rjust(width)
    if digits == 0:
        return str(round(v)).rjust(width)
    if v != 0 and abs(v) < 1e-3:
        return f"{v:.3g}".rjust(width)
    return f"{v:.{digits}f}".rjust(width)


def render_report_text(report: MetricsReport) -> str:
    """Fixed-width tables: overall metrics, category metrics, distributions, t-tests."""
    out: list[str] = [f"# metrics report v{report.version}", ""]
    if report.overall:
        names = [f"{p.a} vs {p.b}" for p in report.overall]
        w = max(12, *(len(n) + 2 for n in names))
        out.append("Overall metrics")
        out.append("Metric".ljust(12) + "".join(n.rjust(w) for n in names))
        for label, attr in (("Correlation", "corr"), ("MAE", "mae"), ("QWK", "qwk")):
            out.append(label.ljust(12) + "".join(_fmt(getattr(p, attr), w) for p in report.overall))
        out.append("")
    if report.categories:
        out.append("Category metrics")
        first = next(iter(report.categories.values()))
        heads = [f"{p.a}/{p.b} {m}" for m in ("Corr", "MAE", "QWK") for p in first]
        w = max(12, *(len(h) + 2 for h in heads))
        out.append("Category".ljust(10) + "".join(h.rjust(w) for h in heads))
        for cat, rows in report.categories.items():
            cells = [getattr(p, m) for m in ("corr", "mae", "qwk") for p in rows]
            out.append(cat.ljust(10) + "".join(_fmt(c, w) for c in cells))
        out.append("")
    if report.distributions:
        labels = list(report.distributions)
        w = max(10, *(len(lb) + 2 for lb in labels))
        out.append("Score distributions")
        out.append("Metric".ljust(8) + "".join(lb.rjust(w) for lb in labels))
        rows = (("Count", "count"), ("Mean", "mean"), ("Std", "std"), ("Min", "min"),
                ("25%", "q25"), ("50%", "q50"), ("75%", "q75"), ("Max", "max"))
        for name, attr in rows:
            cells = []
            for lb in labels:
                v = getattr(report.distributions[lb], attr)
                cells.append(_fmt(v, w, 0) if attr == "count" else _fmt(v, w, 2))
            out.append(name.ljust(8) + "".join(cells))
        out.append("")
    if report.t_tests:
        out.append("Significance tests")
        out.append("Comparison".ljust(16) + "Kind".ljust(8) + "t-statistic".rjust(14) + "p-value".rjust(14) + "df".rjust(10))
        for t in report.t_tests:
            p = "n/a" if t.p is None else (f"{t.p:.3g}" if t.p else "0")
            out.append(
                f"{t.a} vs {t.b}".ljust(16) + t.kind.ljust(8) + _fmt(t.t, 14) + p.rjust(14) + _fmt(t.df, 10, 1)
            )
        out.append("")
    return "\n".join(out)


@dataclass(frozen=True)
class AnomalyFlag:
    metric: str
    value: float
    baseline_mean: float
    deviation: float
    threshold: float

    def __str__(self) -> str:
        return (
            f"{self.metric}: {self.value:.4g} vs baseline {self.baseline_mean:.4g} "
            f"(|delta| {self.deviation:.4g} > {self.threshold:.4g})"
        )


def anomaly_check(
    report: MetricsReport,
    baseline_reports: Sequence[MetricsReport],
    threshold_per_metric: Mapping[str, float],
) -> list[AnomalyFlag]:
    """Flag metrics that moved further from the baseline mean than allowed.

    Threshold keys are either full metric paths (see
    :meth:`MetricsReport.flatten`) or a leaf name such as ``corr`` which
    applies to every path ending in it; a full path wins. Metrics without a
    threshold are not checked.
    """
    if not baseline_reports:
        raise MetricsError("anomaly check needs at least one baseline report")
    current = report.flatten()
    baselines = [b.flatten() for b in baseline_reports]
    flags = []
    for path, value in current.items():
        leaf = path.rsplit("/", 1)[-1]
        threshold = threshold_per_metric.get(path, threshold_per_metric.get(leaf))
        if threshold is None:
            continue
        history = [b[path] for b in baselines if path in b]
        if not history:
            continue
        base = math.fsum(history) / len(history)
        dev = abs(value - base)
        if dev > threshold:
            flags.append(AnomalyFlag(path, value, base, dev, threshold))
    return flags
