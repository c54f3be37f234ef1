"""Ranking metrics, confusion-matrix metrics, lexical baselines, noise.

Everything here is deterministic and implemented directly so the evaluation
harness, the baselines, and the QC embedder share one character-n-gram
tokenization and no external library's conventions leak into reported
numbers.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .ngram import char_ngrams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedResult:
    """One query's ranked candidate ids and its gold set."""

    query_id: str
    ranked: tuple[str, ...]
    gold: frozenset[str]

    def __post_init__(self) -> None:
        if len(set(self.ranked)) != len(self.ranked):
            raise ValueError(f"query {self.query_id!r}: duplicate ids in ranking")
        if not self.gold:
            raise ValueError(f"query {self.query_id!r}: empty gold set")


def _check_results(results: Sequence[RankedResult]) -> None:
    if not results:
        raise ValueError("no queries to evaluate")


def mrr(results: Sequence[RankedResult]) -> float:
    """Mean reciprocal rank of the first gold hit; 0 for queries with none."""
    _check_results(results)
    total = 0.0
    for result in results:
        for rank, skill_id in enumerate(result.ranked, start=1):
            if skill_id in result.gold:
                total += 1.0 / rank
                break
    return total / len(results)


def recall_at_k(results: Sequence[RankedResult], k: int) -> float:
    _check_results(results)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = 0.0
    for result in results:
        hits = len(set(result.ranked[:k]) & result.gold)
        total += hits / len(result.gold)
    return total / len(results)


def precision_at_k(results: Sequence[RankedResult], k: int) -> float:
    """Precision with denominator min(k, returned); empty rankings score 0."""
    _check_results(results)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = 0.0
    for result in results:
        if result.ranked:
            hits = len(set(result.ranked[:k]) & result.gold)
            total += hits / min(k, len(result.ranked))
    return total / len(results)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_at_k(results: Sequence[RankedResult], k: int) -> float:
    """Per-query harmonic mean of P@k and R@k, averaged over queries."""
    _check_results(results)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = 0.0
    for result in results:
        hits = len(set(result.ranked[:k]) & result.gold)
        precision = hits / min(k, len(result.ranked)) if result.ranked else 0.0
        recall = hits / len(result.gold)
        total += _f1(precision, recall)
    return total / len(results)


def mean_average_precision(results: Sequence[RankedResult]) -> float:
    """Mean over queries of AP; gold ids absent from the ranking add 0."""
    _check_results(results)
    total = 0.0
    for result in results:
        hits = 0
        precision_sum = 0.0
        for rank, skill_id in enumerate(result.ranked, start=1):
            if skill_id in result.gold:
                hits += 1
                precision_sum += hits / rank
        total += precision_sum / len(result.gold)
    return total / len(results)


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise area under the precision-recall curve.

    Thresholds sweep the unique scores descending; tied scores enter as one
    group, so constant scores give exactly the positive prevalence.
    """
    if len(scores) != len(labels) or not scores:
        raise ValueError("scores and labels must be the same nonzero length")
    if any(label not in (0, 1) for label in labels):
        raise ValueError("labels must be 0 or 1")
    total_pos = sum(labels)
    if total_pos == 0:
        raise ValueError("AUPRC needs at least one positive label")
    by_score: dict[float, list[int]] = {}
    for score, label in zip(scores, labels):
        by_score.setdefault(float(score), []).append(int(label))
    area = 0.0
    tp = 0
    kept = 0
    prev_recall = 0.0
    for score in sorted(by_score, reverse=True):
        group = by_score[score]
        tp += sum(group)
        kept += len(group)
        recall = tp / total_pos
        precision = tp / kept
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")
        if self.tp + self.fp + self.fn + self.tn == 0:
            raise ValueError("confusion matrix is all zeros")


@dataclass(frozen=True)
class ConfusionScores:
    accuracy: float
    precision: float
    recall: float
    f1: float


def confusion_metrics(cm: ConfusionMatrix) -> ConfusionScores:
    """Accuracy/precision/recall/F1; zero-denominator metrics are 0 with a warning."""
    total = cm.tp + cm.fp + cm.fn + cm.tn
    accuracy = (cm.tp + cm.tn) / total
    if cm.tp + cm.fp == 0:
        logger.warning("no predicted positives: precision set to 0")
        precision = 0.0
    else:
        precision = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        logger.warning("no actual positives: recall set to 0")
        recall = 0.0
    else:
        recall = cm.tp / (cm.tp + cm.fn)
    return ConfusionScores(accuracy=accuracy, precision=precision, recall=recall, f1=_f1(precision, recall))


# --- character noise ---------------------------------------------------------


def inject_noise(text: str, rate: float, rng: np.random.Generator) -> str:
    """Corrupt ``floor(rate * len)`` distinct positions by substitution or deletion.

    Substituted characters are drawn from the text's own character multiset;
    nothing is ever inserted, so the result never grows.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    n = int(math.floor(rate * len(text)))
    if n == 0:
        return text
    positions = rng.choice(len(text), size=n, replace=False)
    chars: list[str | None] = list(text)
    for pos in positions:
        if rng.random() < 0.5:
            chars[int(pos)] = None  # delete
        else:
            chars[int(pos)] = text[int(rng.integers(len(text)))]
    return "".join(c for c in chars if c is not None)


# --- lexical baselines -------------------------------------------------------


class _GramIndex:
    """Shared n-gram bookkeeping for the lexical retrievers."""

    def __init__(self, skills: Sequence[tuple[str, str]], lo: int = 2, hi: int = 4):
        if not skills:
            raise ValueError("no skills to index")
        self.lo, self.hi = lo, hi
        self.ids = tuple(skill_id for skill_id, _ in skills)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate skill ids")
        self.doc_grams = [Counter(char_ngrams(text, lo, hi)) for _, text in skills]
        if not any(self.doc_grams):
            raise ValueError("empty n-gram vocabulary: no skill text is long enough")
        # rank of each row when ids are sorted lexicographically (tie-break key)
        self.id_rank = np.argsort(np.argsort(np.array(self.ids)))

    def rank_scores(self, scores: np.ndarray, k: int) -> list[tuple[str, float]]:
        order = np.lexsort((self.id_rank, -scores))
        return [(self.ids[i], float(scores[i])) for i in order[:k]]


class TfidfRetriever:
    """Cosine over tf-idf weighted character n-grams.

    IDF statistics come from the union of skill texts and any extra corpus
    passed in, so query-side weighting matches the baseline's fit corpus.
    """

    def __init__(
        self,
        skills: Sequence[tuple[str, str]],
        extra_corpus: Sequence[str] = (),
        lo: int = 2,
        hi: int = 4,
    ):
        self._index = _GramIndex(skills, lo, hi)
        corpus_grams = [set(g) for g in self._index.doc_grams]
        corpus_grams.extend(set(char_ngrams(t, lo, hi)) for t in extra_corpus)
        self._n_docs = len(corpus_grams)
        df: Counter = Counter()
        for grams in corpus_grams:
            df.update(grams)
        self._df = df
        self._doc_vecs: list[dict[str, float]] = []
        for grams in self._index.doc_grams:
            vec = {g: count * self._idf(g) for g, count in grams.items()}
            norm = math.sqrt(sum(w * w for w in vec.values()))
            self._doc_vecs.append({g: w / norm for g, w in vec.items()} if norm else {})
        self._postings: dict[str, list[tuple[int, float]]] = {}
        for doc, vec in enumerate(self._doc_vecs):
            for gram, weight in vec.items():
                self._postings.setdefault(gram, []).append((doc, weight))

    def _idf(self, gram: str) -> float:
        return math.log((1 + self._n_docs) / (1 + self._df.get(gram, 0))) + 1.0

    def rank(self, text: str, k: int) -> list[tuple[str, float]]:
        query = Counter(char_ngrams(text, self._index.lo, self._index.hi))
        vec = {g: count * self._idf(g) for g, count in query.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        scores = np.zeros(len(self._index.ids), dtype=np.float64)
        if norm:
            for gram, weight in vec.items():
                for doc, doc_weight in self._postings.get(gram, ()):
                    scores[doc] += (weight / norm) * doc_weight
        return self._index.rank_scores(scores, k)


class Bm25Retriever:
    """Okapi BM25 over character n-grams; IDF floored at zero."""

    def __init__(
        self,
        skills: Sequence[tuple[str, str]],
        k1: float = 1.5,
        b: float = 0.75,
        lo: int = 2,
        hi: int = 4,
    ):
        self._index = _GramIndex(skills, lo, hi)
        self.k1, self.b = k1, b
        self._doc_lens = np.array([sum(g.values()) for g in self._index.doc_grams], dtype=np.float64)
        self._avg_len = float(self._doc_lens.mean()) if self._doc_lens.size else 0.0
        n = len(self._index.ids)
        self._idf = {}
        df: Counter = Counter()
        for grams in self._index.doc_grams:
            df.update(set(grams))
        for gram, count in df.items():
            self._idf[gram] = max(0.0, math.log((n - count + 0.5) / (count + 0.5)))
        self._postings = {}
        for doc, grams in enumerate(self._index.doc_grams):
            for gram, count in grams.items():
                self._postings.setdefault(gram, []).append((doc, count))

    def rank(self, text: str, k: int) -> list[tuple[str, float]]:
        scores = np.zeros(len(self._index.ids), dtype=np.float64)
        for gram in set(char_ngrams(text, self._index.lo, self._index.hi)):
            idf = self._idf.get(gram)
            if idf is None:
                continue
            for doc, tf in self._postings.get(gram, ()):
                denom = tf + self.k1 * (1 - self.b + self.b * self._doc_lens[doc] / self._avg_len)
                scores[doc] += idf * tf * (self.k1 + 1) / denom
        return self._index.rank_scores(scores, k)


def baseline_results(
    retriever, queries: Sequence[tuple[str, str, frozenset]], k: int
) -> list[RankedResult]:
    """Run a lexical retriever over (query_id, text, gold) triples."""
    return [
        RankedResult(
            query_id=query_id,
            ranked=tuple(skill_id for skill_id, _ in retriever.rank(text, k)),
            gold=frozenset(gold),
        )
        for query_id, text, gold in queries
    ]
