"""Skill-relevance sentence filter: segmentation, scoring, threshold choice.

Job postings are mostly boilerplate (benefits, logistics, culture); passing
every sentence to retrieval buries real skill demands in noise. A small
trained scorer assigns each sentence a relevance probability and a threshold
chosen on held-out data trades precision against a recall floor.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, serialize_checkpoint
from .ngram import hashed_ngram_vector

SENTENCE_DELIMITERS = "。．.！!？?"


class FilterTrainingError(ValueError):
    """Unusable training data for the relevance filter."""


def segment_posting(text: str) -> list[str]:
    """Split a posting into sentences on CJK/ASCII terminal punctuation.

    Delimiters are consumed; blank segments are dropped; everything else is
    kept verbatim, so joining segments with their delimiters reconstructs the
    input up to dropped blanks.
    """
    segments = []
    current: list[str] = []
    for char in text:
        if char in SENTENCE_DELIMITERS:
            segment = "".join(current)
            if segment.strip():
                segments.append(segment)
            current = []
        else:
            current.append(char)
    tail = "".join(current)
    if tail.strip():
        segments.append(tail)
    return segments


@dataclass(frozen=True)
class FilterConfig:
    seed: int = 42
    epochs: int = 20
    learning_rate: float = 0.5
    batch_size: int = 64
    l2: float = 1e-4
    hash_dim: int = 1 << 14
    ngram_lo: int = 1
    ngram_hi: int = 3
    val_fraction: float = 0.2
    min_recall: float = 0.8


@dataclass(frozen=True)
class ThresholdSelection:
    threshold: float
    precision: float
    recall: float
    met_constraint: bool


def select_threshold(
    scores: Sequence[float], labels: Sequence[int], min_recall: float = 0.8
) -> ThresholdSelection:
    """Pick the score cutoff maximizing precision subject to a recall floor.

    Candidates are the unique scores plus 0. Ties prefer higher recall, then
    the lower threshold. If no candidate reaches ``min_recall`` the
    recall-maximal threshold is returned with ``met_constraint=False``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    total_pos = int((labels == 1).sum())
    if total_pos == 0:
        raise ValueError("threshold selection needs at least one positive label")
    rows = []
    for tau in sorted(set(float(s) for s in scores) | {0.0}):
        kept = scores >= tau
        tp = int(((labels == 1) & kept).sum())
        fp = int(((labels == 0) & kept).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / total_pos
        rows.append((precision, recall, -tau))
    qualifying = [r for r in rows if r[1] >= min_recall]
    precision, recall, neg_tau = max(qualifying) if qualifying else max(
        rows, key=lambda r: (r[1], r[0], r[2])
    )
    return ThresholdSelection(
        threshold=-neg_tau, precision=precision, recall=recall, met_constraint=bool(qualifying)
    )


class FilterModel:
    """Logistic scorer over hashed character n-gram counts."""

    def __init__(
        self,
        weights: np.ndarray,
        bias: float,
        threshold: float,
        config: FilterConfig,
        selection: ThresholdSelection | None = None,
    ):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.threshold = float(threshold)
        self.config = config
        self.selection = selection

    def _features(self, texts: Sequence[str]) -> np.ndarray:
        cfg = self.config
        return np.stack(
            [hashed_ngram_vector(t, dim=cfg.hash_dim, lo=cfg.ngram_lo, hi=cfg.ngram_hi) for t in texts]
        )

    def score(self, texts: Sequence[str]) -> np.ndarray:
        """Relevance probability per text, in [0, 1]."""
        if len(texts) == 0:
            return np.zeros(0, dtype=np.float64)
        logits = self._features(texts) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        return (self.score(texts) >= self.threshold).astype(np.int64)

    def to_bytes(self) -> bytes:
        config = {
            "threshold": self.threshold,
            "seed": self.config.seed,
            "hash_dim": self.config.hash_dim,
            "ngram_lo": self.config.ngram_lo,
            "ngram_hi": self.config.ngram_hi,
            "epochs": self.config.epochs,
            "learning_rate": self.config.learning_rate,
            "batch_size": self.config.batch_size,
            "l2": self.config.l2,
            "val_fraction": self.config.val_fraction,
            "min_recall": self.config.min_recall,
        }
        tensors = {"weights": self.weights, "bias": np.array([self.bias])}
        return serialize_checkpoint("sentence_filter", config, tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "FilterModel":
        kind, config, tensors = load_checkpoint(path)
        if kind != "sentence_filter":
            raise ValueError(f"{path}: not a sentence filter checkpoint (kind={kind!r})")
        filter_config = FilterConfig(
            seed=int(config["seed"]),
            epochs=int(config["epochs"]),
            learning_rate=float(config["learning_rate"]),
            batch_size=int(config["batch_size"]),
            l2=float(config["l2"]),
            hash_dim=int(config["hash_dim"]),
            ngram_lo=int(config["ngram_lo"]),
            ngram_hi=int(config["ngram_hi"]),
            val_fraction=float(config["val_fraction"]),
            min_recall=float(config["min_recall"]),
        )
        return cls(
            weights=tensors["weights"].astype(np.float64),
            bias=float(tensors["bias"][0]),
            threshold=float(config["threshold"]),
            config=filter_config,
        )


def _balanced_split(
    positives: Sequence[str], negatives: Sequence[str], config: FilterConfig
) -> tuple[list[str], list[int], list[str], list[int]]:
    rng = np.random.default_rng(config.seed)
    size = min(len(positives), len(negatives))

    def pick(texts: Sequence[str]) -> list[str]:
        if len(texts) == size:
            return list(texts)
        idx = sorted(rng.choice(len(texts), size=size, replace=False).tolist())
        return [texts[i] for i in idx]

    pos, neg = pick(positives), pick(negatives)
    val_n = max(1, round(config.val_fraction * size)) if size > 1 else 0
    pos_order = rng.permutation(size).tolist()
    neg_order = rng.permutation(size).tolist()
    train_texts, train_labels, val_texts, val_labels = [], [], [], []
    for texts, order, label in ((pos, pos_order, 1), (neg, neg_order, 0)):
        for rank, idx in enumerate(order):
            if rank < val_n:
                val_texts.append(texts[idx])
                val_labels.append(label)
            else:
                train_texts.append(texts[idx])
                train_labels.append(label)
    return train_texts, train_labels, val_texts, val_labels


def train_filter(
    positives: Sequence[str], negatives: Sequence[str], config: FilterConfig | None = None
) -> FilterModel:
    """Train the scorer on class-balanced data and pick its threshold.

    The larger class is downsampled with the run seed; the threshold comes
    from ``select_threshold`` on a held-out slice (skipped when the data is
    too small to hold anything out, in which case 0.5 is used).
    """
    config = config or FilterConfig()
    if not positives or not negatives:
        raise FilterTrainingError("both positive and negative texts are required")
    train_texts, train_labels, val_texts, val_labels = _balanced_split(positives, negatives, config)
    if not train_texts:
        raise FilterTrainingError("no training data left after the validation split")
    features = np.stack(
        [
            hashed_ngram_vector(t, dim=config.hash_dim, lo=config.ngram_lo, hi=config.ngram_hi)
            for t in train_texts
        ]
    )
    labels = np.asarray(train_labels, dtype=np.float64)
    rng = np.random.default_rng(config.seed + 1)
    weights = np.zeros(config.hash_dim, dtype=np.float64)
    bias = 0.0
    n = len(train_texts)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            logits = features[batch] @ weights + bias
            probs = 1.0 / (1.0 + np.exp(-logits))
            error = probs - labels[batch]
            grad_w = features[batch].T @ error / len(batch) + config.l2 * weights
            grad_b = float(error.mean())
            weights -= config.learning_rate * grad_w
            bias -= config.learning_rate * grad_b
    model = FilterModel(weights, bias, threshold=0.5, config=config)
    if val_texts and any(val_labels):
        selection = select_threshold(
            model.score(val_texts).tolist(), val_labels, min_recall=config.min_recall
        )
        model.threshold = selection.threshold
        model.selection = selection
    return model


def apply_filter(model: FilterModel, sentences: Sequence[str], threshold: float | None = None) -> list[str]:
    """Keep sentences scoring at or above the threshold, order preserved."""
    if not sentences:
        return []
    tau = model.threshold if threshold is None else threshold
    scores = model.score(sentences)
    return [s for s, score in zip(sentences, scores) if score >= tau]


def keyword_baseline(sentences: Sequence[str], lexicon: Sequence[str]) -> list[int]:
    """Exact substring matcher: 1 if any lexicon term occurs in the sentence."""
    terms = [t for t in lexicon if t]
    return [1 if any(term in s for term in terms) else 0 for s in sentences]


def load_labeled_jsonl(path: str | Path) -> list[tuple[str, int]]:
    """Read ``{"text": ..., "label": 0|1}`` lines."""
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "text" not in record or record.get("label") not in (0, 1):
                raise ValueError(f"{path}: line {line_no}: expected {{'text', 'label': 0|1}}")
            rows.append((record["text"], int(record["label"])))
    return rows


def save_labeled_jsonl(rows: Sequence[tuple[str, int]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for text, label in rows:
            fh.write(json.dumps({"text": text, "label": int(label)}, ensure_ascii=False) + "\n")
