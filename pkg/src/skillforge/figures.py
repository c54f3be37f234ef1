"""Matplotlib figure rendering for experiment reports.

Invoked from the CLI report path: every report gets figures written next to
its ``report.json``/``metrics.csv``. Rendering is read-only over report
dictionaries so it can also be pointed at previously saved runs.
"""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be pinned first

from .experiments import EvaluationReport
from .training import EpochRecord

_BAR_COLOR = "#3c6e9f"
_LINE_COLOR = "#b4543c"


def _save(fig, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _metric_map(report: EvaluationReport) -> dict[tuple[str, int | None], float]:
    return {(row.metric, row.k): row.value for row in report.rows}


def _bar(ax, labels, values, title, ylabel="value"):
    ax.bar(range(len(labels)), values, color=_BAR_COLOR)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(ylabel)
    ax.set_title(title)


def render_filter_eval(report: EvaluationReport, out_dir: Path) -> list[Path]:
    metric_names = ["accuracy", "precision", "recall", "f1", "auprc"]
    values = [report.metric(m) for m in metric_names]
    keyword = [report.metric(f"keyword_{m}") for m in metric_names[:4]]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.4
    ax.bar([i - width / 2 for i in range(4)], values[:4], width, label="filter", color=_BAR_COLOR)
    ax.bar([i + width / 2 for i in range(4)], keyword, width, label="keyword", color=_LINE_COLOR)
    ax.set_xticks(range(4))
    ax.set_xticklabels(metric_names[:4])
    ax.set_ylim(0.0, 1.05)
    ax.set_title("sentence filter vs keyword baseline")
    ax.legend()
    paths = [_save(fig, out_dir, "filter_vs_keyword")]
    fig, ax = plt.subplots(figsize=(4, 3))
    _bar(ax, ["auprc"], [values[4]], "filter AUPRC")
    paths.append(_save(fig, out_dir, "filter_auprc"))
    return paths


def render_synthetic_holdout(report: EvaluationReport, out_dir: Path) -> list[Path]:
    metrics = _metric_map(report)
    ks = sorted(k for (name, k) in metrics if name == "recall" and k is not None)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(ks, [metrics[("recall", k)] for k in ks], "o-", color=_BAR_COLOR, label="encoder")
    if ("tfidf_recall", ks[0]) in metrics:
        ax.plot(
            ks, [metrics[("tfidf_recall", k)] for k in ks], "s--", color=_LINE_COLOR, label="tf-idf"
        )
    if ("bm25_recall", ks[0]) in metrics:
        ax.plot(ks, [metrics[("bm25_recall", k)] for k in ks], "^:", color="#6a8f54", label="bm25")
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("holdout recall@k")
    ax.legend()
    paths = [_save(fig, out_dir, "holdout_recall_at_k")]
    labels = ["mrr", "map", "tfidf_mrr", "bm25_mrr"]
    present = [l for l in labels if (l, None) in metrics]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    _bar(ax, present, [metrics[(l, None)] for l in present], "holdout ranking quality")
    paths.append(_save(fig, out_dir, "holdout_summary"))
    return paths


def render_ablation_grid(report: EvaluationReport, out_dir: Path) -> list[Path]:
    grid = report.details.get("grid", {})
    margins = sorted({cell["margin"] for cell in grid.values()})
    negatives = sorted({cell["negatives"] for cell in grid.values()})
    paths = []
    if margins and negatives:
        matrix = [
            [
                next(
                    c["mrr"]
                    for c in grid.values()
                    if c["margin"] == m and c["negatives"] == n
                )
                for n in negatives
            ]
            for m in margins
        ]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        image = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xticks(range(len(negatives)))
        ax.set_xticklabels([str(n) for n in negatives])
        ax.set_yticks(range(len(margins)))
        ax.set_yticklabels([f"{m:g}" for m in margins])
        ax.set_xlabel("negatives per positive")
        ax.set_ylabel("margin")
        ax.set_title("holdout MRR over the grid")
        for i, row in enumerate(matrix):
            for j, value in enumerate(row):
                ax.text(j, i, f"{value:.2f}", ha="center", va="center", color="white", fontsize=8)
        fig.colorbar(image, ax=ax)
        paths.append(_save(fig, out_dir, "ablation_grid_mrr"))
    pooling_rows = [(r.metric, r.value) for r in report.rows if r.metric.startswith("mrr_pooling_")]
    if pooling_rows:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        _bar(
            ax,
            [name.removeprefix("mrr_pooling_") for name, _ in pooling_rows],
            [v for _, v in pooling_rows],
            "pooling variants (MRR)",
        )
        paths.append(_save(fig, out_dir, "ablation_pooling"))
    throughput = {
        name.removeprefix("throughput_"): value
        for name, value in report.timing.items()
        if name.startswith("throughput_")
    }
    if throughput:
        pairs = sorted(
            (int(re.search(r"neg(\d+)", key).group(1)), value)
            for key, value in throughput.items()
            if re.search(r"neg(\d+)", key)
        )
        if pairs:
            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            ax.plot([p[0] for p in pairs], [p[1] for p in pairs], "o-", color=_LINE_COLOR)
            ax.set_xlabel("negatives per positive")
            ax.set_ylabel("training samples/sec")
            ax.set_title("training throughput vs negatives")
            paths.append(_save(fig, out_dir, "ablation_throughput"))
    return paths


def render_end_to_end(report: EvaluationReport, out_dir: Path) -> list[Path]:
    metrics = _metric_map(report)
    ks = sorted(k for (name, k) in metrics if name == "f1" and k is not None)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.25
    for offset, (name, color) in enumerate(
        (("precision", _BAR_COLOR), ("recall", "#6a8f54"), ("f1", _LINE_COLOR))
    ):
        ax.bar(
            [i + (offset - 1) * width for i in range(len(ks))],
            [metrics[(name, k)] for k in ks],
            width,
            label=name,
            color=color,
        )
    ax.set_xticks(range(len(ks)))
    ax.set_xticklabels([f"k={k}" for k in ks])
    ax.set_ylim(0.0, 1.05)
    gamma = report.params.get("gamma")
    ax.set_title(f"posting-level extraction (gamma={gamma:g})" if gamma is not None else "posting-level extraction")
    ax.legend()
    return [_save(fig, out_dir, "end_to_end_quality")]


def render_robustness(report: EvaluationReport, out_dir: Path) -> list[Path]:
    rates = report.params.get("rates", [])
    values = [report.metric(f"mrr_rate{rate:g}") for rate in rates]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(rates, values, "o-", color=_BAR_COLOR)
    ax.set_xlabel("character noise rate")
    ax.set_ylabel("MRR")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("ranking robustness to input noise")
    return [_save(fig, out_dir, "robustness_mrr")]


def render_scaling(report: EvaluationReport, out_dir: Path) -> list[Path]:
    sizes = report.params.get("sizes", [])
    mrrs = [report.metric(f"mrr_size{size}") for size in sizes]
    seconds = [report.timing.get(f"train_seconds_size{size}", 0.0) for size in sizes]
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2))
    left.plot(sizes, seconds, "o-", color=_LINE_COLOR)
    left.set_xlabel("training samples")
    left.set_ylabel("train seconds")
    left.set_title("training cost")
    right.plot(sizes, mrrs, "o-", color=_BAR_COLOR)
    right.set_xlabel("training samples")
    right.set_ylabel("holdout MRR")
    right.set_ylim(0.0, 1.05)
    right.set_title("quality vs data size")
    return [_save(fig, out_dir, "scaling")]


def render_history(history: list[EpochRecord], out_dir: Path) -> list[Path]:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    epochs = [r.epoch for r in history]
    ax.plot(epochs, [r.mean_loss for r in history], "o-", color=_LINE_COLOR, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    if any(r.val_mrr is not None for r in history):
        twin = ax.twinx()
        twin.plot(
            epochs,
            [r.val_mrr if r.val_mrr is not None else float("nan") for r in history],
            "s--",
            color=_BAR_COLOR,
            label="val MRR",
        )
        twin.set_ylabel("val MRR")
        twin.set_ylim(0.0, 1.05)
    ax.set_title("training history")
    return [_save(fig, out_dir, "training_history")]


_RENDERERS = {
    "filter_eval": render_filter_eval,
    "synthetic_holdout": render_synthetic_holdout,
    "ablation_grid": render_ablation_grid,
    "end_to_end": render_end_to_end,
    "robustness": render_robustness,
    "scaling": render_scaling,
}


def render_report_figures(report: EvaluationReport, out_dir: str | Path) -> list[Path]:
    """Render the figures for one report into ``out_dir``; returns the paths."""
    renderer = _RENDERERS.get(report.experiment)
    if renderer is None:
        raise ValueError(f"no figure renderer for experiment {report.experiment!r}")
    return renderer(report, Path(out_dir))
