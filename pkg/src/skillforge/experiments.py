"""Evaluation harness: the six standard experiment protocols.

Each experiment returns an ``EvaluationReport`` whose bounded metrics go to
``metrics.csv`` rows and whose timings/counts stay in side channels. Figure
rendering deliberately lives elsewhere (the CLI report path); this module
only measures.
"""

from __future__ import annotations

import json
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import BiEncoder, EncoderConfig, make_model
from .index import (
    PostingPrediction,
    RetrievalParams,
    SkillIndex,
    build_index,
    load_index,
    predict_posting,
    tune_gamma,
)
from .metrics import (
    Bm25Retriever,
    ConfusionMatrix,
    RankedResult,
    TfidfRetriever,
    auprc,
    baseline_results,
    confusion_metrics,
    f1_at_k,
    inject_noise,
    mean_average_precision,
    mrr,
    precision_at_k,
    recall_at_k,
)
from .sentence_filter import FilterModel, keyword_baseline, load_labeled_jsonl
from .syngen import SyntheticDataset, SyntheticSample
from .taxonomy import SkillTaxonomy, load_taxonomy
from .training import TrainConfig, measure_throughput, rank_against_inventory, train

EXPERIMENTS = (
    "filter_eval",
    "synthetic_holdout",
    "ablation_grid",
    "end_to_end",
    "robustness",
    "scaling",
)


class MissingArtifactError(FileNotFoundError):
    """A required input artifact is absent; the message names it."""


@dataclass(frozen=True)
class MetricRow:
    metric: str
    k: int | None
    value: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.value) or not 0.0 <= self.value <= 1.0 + 1e-9:
            raise ValueError(f"metric {self.metric!r} must be in [0, 1], got {self.value}")


@dataclass
class EvaluationReport:
    experiment: str
    rows: list[MetricRow] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def add(self, metric: str, value: float, k: int | None = None) -> None:
        self.rows.append(MetricRow(metric=metric, k=k, value=float(value)))

    def metric(self, metric: str, k: int | None = None) -> float:
        for row in self.rows:
            if row.metric == metric and row.k == k:
                return row.value
        raise KeyError(f"no metric {metric!r} (k={k}) in {self.experiment} report")

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "metrics": [{"metric": r.metric, "k": r.k, "value": r.value} for r in self.rows],
            "params": self.params,
            "timing": self.timing,
            "provenance": self.provenance,
            "details": self.details,
        }

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        """Write report.json and metrics.csv; returns their paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        report_path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        csv_path = out_dir / "metrics.csv"
        seed = self.params.get("seed", "")
        lines = ["experiment,metric,k,value,seed"]
        for row in self.rows:
            k = "" if row.k is None else str(row.k)
            lines.append(f"{self.experiment},{row.metric},{k},{row.value:.10g},{seed}")
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return report_path, csv_path


def load_report(path: str | Path) -> EvaluationReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    report = EvaluationReport(
        experiment=data["experiment"],
        params=data.get("params", {}),
        timing=data.get("timing", {}),
        provenance=data.get("provenance", {}),
        details=data.get("details", {}),
    )
    for row in data.get("metrics", []):
        report.add(row["metric"], row["value"], row.get("k"))
    return report


# --- shared plumbing ----------------------------------------------------------


def split_holdout(
    samples: Sequence[SyntheticSample], fraction: float = 0.2, seed: int = 42
) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Deterministic train/holdout split of synthetic samples."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_holdout = max(1, int(round(fraction * len(samples))))
    holdout_idx = set(order[:n_holdout].tolist())
    train_part = [s for i, s in enumerate(samples) if i not in holdout_idx]
    holdout_part = [s for i, s in enumerate(samples) if i in holdout_idx]
    return train_part, holdout_part


def ranked_results_for_model(
    model: BiEncoder, queries: Sequence[tuple[str, frozenset]], taxonomy: SkillTaxonomy
) -> list[RankedResult]:
    rankings = rank_against_inventory(model, [text for text, _ in queries], taxonomy)
    return [
        RankedResult(query_id=str(i), ranked=tuple(ranked), gold=frozenset(gold))
        for i, ((_, gold), ranked) in enumerate(zip(queries, rankings))
    ]


def queries_from_samples(samples: Sequence[SyntheticSample]) -> list[tuple[str, frozenset]]:
    return [(s.text, frozenset(s.skill_ids)) for s in samples if s.skill_ids]


def load_annotations(path: str | Path) -> list[dict]:
    """Gold postings: ``{"posting_id", "text", "skill_ids"}`` per line."""
    postings = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            missing = {"posting_id", "text", "skill_ids"} - set(record)
            if missing:
                raise ValueError(f"{path}: line {line_no}: missing fields {sorted(missing)}")
            postings.append(record)
    return postings


# --- experiments ---------------------------------------------------------------


def filter_eval_experiment(
    filter_model: FilterModel,
    labeled: Sequence[tuple[str, int]],
    lexicon: Sequence[str],
    seed: int = 42,
) -> EvaluationReport:
    """Filter quality on held-out labeled sentences, against a keyword matcher."""
    if not labeled:
        raise ValueError("no labeled sentences to evaluate")
    texts = [t for t, _ in labeled]
    labels = [l for _, l in labeled]
    report = EvaluationReport(
        experiment="filter_eval",
        params={"seed": seed, "threshold": filter_model.threshold, "n_eval": len(labeled)},
    )
    start = time.perf_counter()
    scores = filter_model.score(texts)
    predictions = (scores >= filter_model.threshold).astype(int)
    report.timing["score_seconds"] = time.perf_counter() - start
    cm = ConfusionMatrix(
        tp=int(((predictions == 1) & (np.array(labels) == 1)).sum()),
        fp=int(((predictions == 1) & (np.array(labels) == 0)).sum()),
        fn=int(((predictions == 0) & (np.array(labels) == 1)).sum()),
        tn=int(((predictions == 0) & (np.array(labels) == 0)).sum()),
    )
    scored = confusion_metrics(cm)
    report.add("accuracy", scored.accuracy)
    report.add("precision", scored.precision)
    report.add("recall", scored.recall)
    report.add("f1", scored.f1)
    report.add("auprc", auprc(scores.tolist(), labels))
    keyword = keyword_baseline(texts, lexicon)
    keyword_cm = ConfusionMatrix(
        tp=sum(1 for p, l in zip(keyword, labels) if p == 1 and l == 1),
        fp=sum(1 for p, l in zip(keyword, labels) if p == 1 and l == 0),
        fn=sum(1 for p, l in zip(keyword, labels) if p == 0 and l == 1),
        tn=sum(1 for p, l in zip(keyword, labels) if p == 0 and l == 0),
    )
    keyword_scored = confusion_metrics(keyword_cm)
    report.add("keyword_accuracy", keyword_scored.accuracy)
    report.add("keyword_precision", keyword_scored.precision)
    report.add("keyword_recall", keyword_scored.recall)
    report.add("keyword_f1", keyword_scored.f1)
    report.details["confusion"] = {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn}
    report.details["keyword_confusion"] = {
        "tp": keyword_cm.tp,
        "fp": keyword_cm.fp,
        "fn": keyword_cm.fn,
        "tn": keyword_cm.tn,
    }
    if filter_model.selection is not None:
        report.details["threshold_selection"] = {
            "threshold": filter_model.selection.threshold,
            "precision": filter_model.selection.precision,
            "recall": filter_model.selection.recall,
            "met_constraint": filter_model.selection.met_constraint,
        }
    return report


def synthetic_holdout_experiment(
    model: BiEncoder,
    holdout: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    seed: int = 42,
    ks: Sequence[int] = (1, 3, 5, 10),
) -> EvaluationReport:
    """Sentence-level ranking on held-out synthetic samples vs lexical baselines."""
    queries = queries_from_samples(holdout)
    if not queries:
        raise ValueError("holdout contains no labeled samples")
    report = EvaluationReport(
        experiment="synthetic_holdout",
        params={"seed": seed, "n_queries": len(queries), "ks": list(ks)},
        provenance={"model_fingerprint": model.fingerprint()},
    )
    start = time.perf_counter()
    results = ranked_results_for_model(model, queries, taxonomy)
    report.timing["rank_seconds"] = time.perf_counter() - start
    report.add("mrr", mrr(results))
    report.add("map", mean_average_precision(results))
    for k in ks:
        report.add("recall", recall_at_k(results, k), k=k)
        report.add("precision", precision_at_k(results, k), k=k)
    skills = [(s.skill_id, s.description) for s in taxonomy]
    triples = [(str(i), text, gold) for i, (text, gold) in enumerate(queries)]
    for name, retriever in (
        ("tfidf", TfidfRetriever(skills, extra_corpus=[t for t, _ in queries])),
        ("bm25", Bm25Retriever(skills)),
    ):
        base = baseline_results(retriever, triples, k=len(taxonomy))
        report.add(f"{name}_mrr", mrr(base))
        report.add(f"{name}_map", mean_average_precision(base))
        for k in ks:
            report.add(f"{name}_recall", recall_at_k(base, k), k=k)
    return report


def ablation_grid_experiment(
    samples: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    margins: Sequence[float] = (0.3, 0.5, 0.7),
    negative_counts: Sequence[int] = (1, 5, 10),
    poolings: Sequence[str] = ("attention", "mean", "first_token"),
    holdout_fraction: float = 0.2,
    measure_speed: bool = False,
) -> EvaluationReport:
    """Margin/negative-count grid plus pooling variants, trained per cell.

    Every cell trains from the same initialization seed on the same split,
    so differences isolate the swept hyperparameter.
    """
    positives = [s for s in samples if s.skill_ids]
    train_part, holdout = split_holdout(positives, holdout_fraction, train_config.seed)
    queries = queries_from_samples(holdout)
    corpus = [s.text for s in train_part] + [s.description for s in taxonomy]
    report = EvaluationReport(
        experiment="ablation_grid",
        params={
            "seed": train_config.seed,
            "margins": list(margins),
            "negative_counts": list(negative_counts),
            "poolings": list(poolings),
            "n_train": len(train_part),
            "n_holdout": len(holdout),
        },
    )

    def cell_mrr(enc_cfg: EncoderConfig, cfg: TrainConfig) -> tuple[float, BiEncoder]:
        model = make_model(enc_cfg, corpus)
        train(model, train_part, taxonomy, cfg)
        results = ranked_results_for_model(model, queries, taxonomy)
        return mrr(results), model

    grid: dict[str, dict] = {}
    for margin in margins:
        for k_neg in negative_counts:
            cfg = replace(train_config, margin=margin, num_negatives=k_neg)
            start = time.perf_counter()
            value, model = cell_mrr(encoder_config, cfg)
            elapsed = time.perf_counter() - start
            key = f"margin{margin:g}_neg{k_neg}"
            report.add(f"mrr_{key}", value)
            grid[key] = {"margin": margin, "negatives": k_neg, "mrr": value, "seconds": elapsed}
            if measure_speed:
                report.timing[f"throughput_{key}"] = measure_throughput(
                    model, train_part, taxonomy, cfg
                )
    for pooling in poolings:
        value, _ = cell_mrr(replace(encoder_config, pooling=pooling), train_config)
        report.add(f"mrr_pooling_{pooling}", value)
    report.details["grid"] = grid
    return report


def posting_ranking_results(
    predictions: Sequence[PostingPrediction], golds: Sequence[frozenset], ids: Sequence[str]
) -> list[RankedResult]:
    return [
        RankedResult(query_id=pid, ranked=tuple(p.top_k(len(p.ranked))), gold=frozenset(g))
        for pid, p, g in zip(ids, predictions, golds)
    ]


def end_to_end_experiment(
    filter_model: FilterModel | None,
    model: BiEncoder,
    skill_index: SkillIndex,
    postings: Sequence[dict],
    seed: int = 42,
    dev_fraction: float = 0.5,
    gamma: float | None = None,
    gamma_grid: Sequence[float] | None = None,
    budget: int = 50,
    ks: Sequence[int] = (1, 3, 5),
) -> EvaluationReport:
    """Posting-level extraction quality with a tuned similarity threshold.

    When ``gamma`` is None it is tuned on a dev split and evaluated on the
    rest; otherwise all postings evaluate under the given value.
    """
    if not postings:
        raise ValueError("no postings to evaluate")
    for record in postings:
        if not record.get("skill_ids"):
            raise ValueError(f"posting {record.get('posting_id')!r} has no gold skills")
    report = EvaluationReport(
        experiment="end_to_end",
        params={"seed": seed, "budget": budget, "ks": list(ks), "n_postings": len(postings)},
        provenance={"index_fingerprint": skill_index.fingerprint},
    )

    def run(batch: Sequence[dict], g: float) -> list[PostingPrediction]:
        params = RetrievalParams(budget=budget, threshold=g)
        return [
            predict_posting(filter_model, model, skill_index, rec["text"], params=params)
            for rec in batch
        ]

    if gamma is None:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(postings))
        n_dev = max(1, int(round(dev_fraction * len(postings))))
        dev = [postings[i] for i in order[:n_dev]]
        test = [postings[i] for i in order[n_dev:]] or dev
        dev_golds = [frozenset(rec["skill_ids"]) for rec in dev]
        selection = tune_gamma(
            lambda g: [p.ranked for p in run(dev, g)], dev_golds, grid=gamma_grid
        )
        gamma = selection.gamma
        report.details["gamma_selection"] = {
            "gamma": selection.gamma,
            "dev_f1_at_5": selection.f1,
            "all_zero": selection.all_zero,
        }
    else:
        test = list(postings)
    report.params["gamma"] = gamma
    start = time.perf_counter()
    predictions = run(test, gamma)
    elapsed = time.perf_counter() - start
    report.timing["predict_seconds"] = elapsed
    report.timing["latency_per_posting"] = elapsed / len(test)
    golds = [frozenset(rec["skill_ids"]) for rec in test]
    ids = [rec["posting_id"] for rec in test]
    results = posting_ranking_results(predictions, golds, ids)
    for k in ks:
        report.add("precision", precision_at_k(results, k), k=k)
        report.add("recall", recall_at_k(results, k), k=k)
        report.add("f1", f1_at_k(results, k), k=k)
    report.params["n_test"] = len(test)
    return report


def robustness_experiment(
    model: BiEncoder,
    holdout: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    rates: Sequence[float] = (0.0, 0.1, 0.2),
    seed: int = 42,
) -> EvaluationReport:
    """Ranking quality as character noise corrupts the query sentences.

    Noise draws come from a generator seeded by (seed, rate), so each rate's
    corruption is reproducible in isolation.
    """
    queries = queries_from_samples(holdout)
    if not queries:
        raise ValueError("holdout contains no labeled samples")
    report = EvaluationReport(
        experiment="robustness",
        params={"seed": seed, "rates": [float(r) for r in rates], "n_queries": len(queries)},
    )
    baseline_mrr = None
    for rate in rates:
        rng = np.random.default_rng(seed + int(round(rate * 1000)))
        corrupted = [(inject_noise(text, rate, rng), gold) for text, gold in queries]
        corrupted = [(text, gold) for text, gold in corrupted if text.strip()]
        results = ranked_results_for_model(model, corrupted, taxonomy)
        value = mrr(results)
        report.add(f"mrr_rate{rate:g}", value)
        if baseline_mrr is None:
            baseline_mrr = value
        report.details[f"relative_to_clean_rate{rate:g}"] = (
            value / baseline_mrr if baseline_mrr else 0.0
        )
    return report


def scaling_experiment(
    samples: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    sizes: Sequence[int] = (50, 100, 200),
    holdout_fraction: float = 0.2,
) -> EvaluationReport:
    """Wall-clock and quality as the training set grows."""
    positives = [s for s in samples if s.skill_ids]
    train_part, holdout = split_holdout(positives, holdout_fraction, train_config.seed)
    queries = queries_from_samples(holdout)
    report = EvaluationReport(
        experiment="scaling",
        params={"seed": train_config.seed, "sizes": [int(s) for s in sizes]},
    )
    corpus = [s.text for s in train_part] + [s.description for s in taxonomy]
    for size in sizes:
        subset = train_part[: int(size)]
        if not subset:
            raise ValueError(f"size {size} leaves no training data")
        model = make_model(encoder_config, corpus)
        start = time.perf_counter()
        train(model, subset, taxonomy, train_config)
        elapsed = time.perf_counter() - start
        results = ranked_results_for_model(model, queries, taxonomy)
        report.add(f"mrr_size{int(size)}", mrr(results))
        report.timing[f"train_seconds_size{int(size)}"] = elapsed
        report.details[f"n_used_size{int(size)}"] = len(subset)
    return report


# --- artifact-path dispatcher ---------------------------------------------------


def _require(config: dict, key: str) -> Path:
    path = config.get(key)
    if not path:
        raise MissingArtifactError(f"experiment config is missing the {key!r} artifact path")
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"required artifact does not exist: {path}")
    return path


def run_experiment(name: str, config: dict) -> EvaluationReport:
    """Load artifacts named by ``config`` paths and run one experiment.

    Expected keys per experiment (all paths): taxonomy, dataset, encoder,
    filter, index, holdout, labeled, postings; plus scalar knobs (seed,
    budget, gamma, rates, sizes, margins, negative_counts).
    """
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    seed = int(config.get("seed", 42))
    if name == "filter_eval":
        filter_model = FilterModel.load(_require(config, "filter"))
        labeled = load_labeled_jsonl(_require(config, "labeled"))
        taxonomy = load_taxonomy(_require(config, "taxonomy"))
        lexicon = [s.preferred_label for s in taxonomy]
        return filter_eval_experiment(filter_model, labeled, lexicon, seed=seed)
    if name == "synthetic_holdout":
        model = BiEncoder.load(_require(config, "encoder"))
        holdout = SyntheticDataset.load_jsonl(_require(config, "holdout")).samples
        taxonomy = load_taxonomy(_require(config, "taxonomy"))
        return synthetic_holdout_experiment(model, holdout, taxonomy, seed=seed)
    if name == "ablation_grid":
        dataset = SyntheticDataset.load_jsonl(_require(config, "dataset"))
        taxonomy = load_taxonomy(_require(config, "taxonomy"))
        return ablation_grid_experiment(
            dataset.positives,
            taxonomy,
            config.get("encoder_config") or EncoderConfig(),
            config.get("train_config") or TrainConfig(seed=seed),
            margins=config.get("margins", (0.3, 0.5, 0.7)),
            negative_counts=config.get("negative_counts", (1, 5, 10)),
            poolings=config.get("poolings", ("attention", "mean", "first_token")),
        )
    if name == "end_to_end":
        model = BiEncoder.load(_require(config, "encoder"))
        skill_index = load_index(_require(config, "index"))
        filter_model = (
            FilterModel.load(_require(config, "filter")) if config.get("filter") else None
        )
        postings = load_annotations(_require(config, "postings"))
        return end_to_end_experiment(
            filter_model,
            model,
            skill_index,
            postings,
            seed=seed,
            gamma=config.get("gamma"),
            gamma_grid=config.get("gamma_grid"),
            budget=int(config.get("budget", 50)),
        )
    if name == "robustness":
        model = BiEncoder.load(_require(config, "encoder"))
        holdout = SyntheticDataset.load_jsonl(_require(config, "holdout")).samples
        taxonomy = load_taxonomy(_require(config, "taxonomy"))
        return robustness_experiment(
            model, holdout, taxonomy, rates=config.get("rates", (0.0, 0.1, 0.2)), seed=seed
        )
    dataset = SyntheticDataset.load_jsonl(_require(config, "dataset"))
    taxonomy = load_taxonomy(_require(config, "taxonomy"))
    return scaling_experiment(
        dataset.positives,
        taxonomy,
        config.get("encoder_config") or EncoderConfig(),
        config.get("train_config") or TrainConfig(seed=seed),
        sizes=config.get("sizes", (50, 100, 200)),
    )
