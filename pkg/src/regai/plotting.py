"""Report figures, drawn from a MetricsReport alone so saved reports can be re-plotted."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

# fixed metadata keeps the PNG bytes stable across runs
_PNG_META = {"Software": None}


def plot_distributions(report: MetricsReport, path: str | Path) -> Path:
    """Box plot per label from the five-number summaries, mean marked with a diamond."""
    labels = [k for k, d in report.distributions.items() if d.count and not math.isnan(d.q50)]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(labels) + 1), 4.0))
    stats = [
        {"label": k, "med": d.q50, "q1": d.q25, "q3": d.q75, "whislo": d.min, "whishi": d.max, "mean": d.mean,
         "fliers": []}
        for k, d in ((k, report.distributions[k]) for k in labels)
    ]
    if stats:
        ax.bxp(stats, showmeans=True, meanprops={"marker": "D"})
    ax.set_ylabel("total score")
    ax.set_title("Score distributions")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_category_metrics(report: MetricsReport, path: str | Path) -> Path:
    """Grouped bars of Corr, MAE and QWK per category, one bar per compared pair."""
    cats = list(report.categories)
    pairs: list[str] = []
    for rows in report.categories.values():
        for p in rows:
            name = f"{p.a} vs {p.b}"
            if name not in pairs:
                pairs.append(name)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8), sharex=True)
    width = 0.8 / max(1, len(pairs))
    for ax, metric in zip(axes, ("corr", "mae", "qwk")):
        for j, name in enumerate(pairs):
            xs, ys = [], []
            for i, cat in enumerate(cats):
                for p in report.categories[cat]:
                    v = getattr(p, metric)
                    if f"{p.a} vs {p.b}" == name and v is not None and not math.isnan(v):
                        xs.append(i + (j - (len(pairs) - 1) / 2) * width)
                        ys.append(v)
            ax.bar(xs, ys, width=width, label=name)
        ax.set_xticks(range(len(cats)))
        ax.set_xticklabels(cats)
        ax.set_title(metric.upper() if metric != "corr" else "Corr")
        ax.grid(axis="y", alpha=0.3)
    if pairs:
        axes[0].legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_figures(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        plot_distributions(report, out_dir / "distributions.png"),
        plot_category_metrics(report, out_dir / "category_metrics.png"),
    ]
