"""Contrastive training of the bi-encoder with margin-based hinge loss.

Each training sample is a sentence plus one or two gold skills. For every
gold skill, negatives are drawn uniformly from the inventory excluding the
sample's full gold set, and the hinge penalizes negatives whose similarity
comes within the margin of the gold similarity.
"""

from __future__ import annotations

import copy
import csv
import math
import time
from collections.abc import Collection, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import BiEncoder
from .metrics import RankedResult, mrr
from .syngen import SyntheticSample
from .taxonomy import SamplingError, SkillTaxonomy


class TrainingError(RuntimeError):
    """Training diverged or was configured unusably."""


def sample_negatives(
    taxonomy: SkillTaxonomy, exclude: Collection[str], k: int, rng: np.random.Generator
) -> list[str]:
    """k skill ids drawn uniformly without replacement, none in ``exclude``."""
    if k < 1:
        raise SamplingError(f"k must be >= 1, got {k}")
    excluded = set(exclude)
    eligible = [skill_id for skill_id in taxonomy.ids if skill_id not in excluded]
    if k > len(eligible):
        raise SamplingError(
            f"cannot draw {k} negatives from {len(eligible)} eligible skills"
        )
    picks = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[int(i)] for i in picks]


def margin_loss(
    query_vec: np.ndarray,
    positive_vec: np.ndarray,
    negative_vecs: Sequence[np.ndarray],
    margin: float = 0.5,
) -> float:
    """Mean hinge over negatives: max(0, margin - sim+ + sim-).

    Uses exact summation, so the value is invariant to negative order.
    """
    if len(negative_vecs) == 0:
        raise ValueError("at least one negative is required")
    query = np.asarray(query_vec, dtype=np.float64)
    sim_pos = float(query @ np.asarray(positive_vec, dtype=np.float64))
    terms = [
        max(0.0, margin - sim_pos + float(query @ np.asarray(neg, dtype=np.float64)))
        for neg in negative_vecs
    ]
    return math.fsum(terms) / len(terms)


def multi_label_loss(
    query_vec: np.ndarray,
    positive_vecs: Sequence[np.ndarray],
    negatives_per_positive: Sequence[Sequence[np.ndarray]],
    margin: float = 0.5,
) -> float:
    """Mean of the single-positive loss over a sample's 1-2 gold skills."""
    if not 1 <= len(positive_vecs) <= 2:
        raise ValueError(f"expected 1 or 2 positives, got {len(positive_vecs)}")
    if len(negatives_per_positive) != len(positive_vecs):
        raise ValueError("negatives_per_positive must align with positives")
    losses = [
        margin_loss(query_vec, pos, negs, margin)
        for pos, negs in zip(positive_vecs, negatives_per_positive)
    ]
    return math.fsum(losses) / len(losses)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.5
    num_negatives: int = 5
    learning_rate: float = 2e-5
    batch_size: int = 32
    epochs: int = 10
    optimizer: str = "adam"
    seed: int = 42
    label_refresh_batches: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.margin <= 2.0:
            raise ValueError(f"margin must be in [0, 2], got {self.margin}")
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("bad batch_size/epochs/learning_rate")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.label_refresh_batches < 1:
            raise ValueError("label_refresh_batches must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_mrr: float | None
    seconds: float
    samples_per_sec: float


def save_history_csv(history: Sequence[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_mrr", "seconds", "samples_per_sec"])
        for rec in history:
            writer.writerow(
                [
                    rec.epoch,
                    f"{rec.mean_loss:.8f}",
                    "" if rec.val_mrr is None else f"{rec.val_mrr:.8f}",
                    f"{rec.seconds:.4f}",
                    f"{rec.samples_per_sec:.4f}",
                ]
            )


def load_history_csv(path: str | Path) -> list[EpochRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                EpochRecord(
                    epoch=int(row["epoch"]),
                    mean_loss=float(row["mean_loss"]),
                    val_mrr=float(row["val_mrr"]) if row["val_mrr"] else None,
                    seconds=float(row["seconds"]),
                    samples_per_sec=float(row["samples_per_sec"]),
                )
            )
    return records


def _check_positives(samples: Sequence[SyntheticSample]) -> None:
    for sample in samples:
        if not 1 <= len(sample.skill_ids) <= 2:
            raise ValueError(
                f"training samples need 1-2 skill ids; got {len(sample.skill_ids)} "
                f"for {sample.text[:40]!r}"
            )


def batch_loss(
    model: BiEncoder,
    batch: Sequence[SyntheticSample],
    negatives: Sequence[Sequence[Sequence[str]]],
    taxonomy: SkillTaxonomy,
    config: TrainConfig,
    cached_labels: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Differentiable mean loss over one batch.

    ``negatives[i][p]`` lists the negative skill ids for positive ``p`` of
    sample ``i``. Texts are deduplicated before the forward pass so a skill
    appearing as gold and negative in one batch is encoded once. If
    ``cached_labels`` is given, label texts found there are treated as
    constants (no gradient to the label tower for those entries).
    """
    cached_labels = cached_labels or {}
    slots: dict[str, int] = {}
    to_encode: list[str] = []

    def slot(text: str) -> int:
        if text not in slots:
            slots[text] = len(to_encode)
            to_encode.append(text)
        return slots[text]

    needed_labels: set[str] = set()
    for sample, negs in zip(batch, negatives):
        slot(sample.text)
        for skill_id in sample.skill_ids:
            needed_labels.add(skill_id)
        for group in negs:
            needed_labels.update(group)
    label_text = {skill_id: taxonomy.description_of(skill_id) for skill_id in needed_labels}
    for skill_id, text in sorted(label_text.items()):
        if skill_id not in cached_labels:
            slot(text)
    embeddings = model(to_encode)

    def vector(skill_id: str) -> torch.Tensor:
        if skill_id in cached_labels:
            return cached_labels[skill_id]
        return embeddings[slots[label_text[skill_id]]]

    sample_losses = []
    for sample, negs in zip(batch, negatives):
        query = embeddings[slots[sample.text]]
        positive_losses = []
        for skill_id, group in zip(sample.skill_ids, negs):
            sim_pos = query @ vector(skill_id)
            neg_matrix = torch.stack([vector(neg_id) for neg_id in group])
            sims_neg = neg_matrix @ query
            hinge = torch.clamp(config.margin - sim_pos + sims_neg, min=0.0)
            positive_losses.append(hinge.mean())
        sample_losses.append(torch.stack(positive_losses).mean())
    return torch.stack(sample_losses).mean()


def draw_epoch_negatives(
    samples: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[list[list[str]]]:
    """Fresh negatives for every positive of every sample."""
    return [
        [
            sample_negatives(taxonomy, sample.skill_ids, config.num_negatives, rng)
            for _ in sample.skill_ids
        ]
        for sample in samples
    ]


def train(
    model: BiEncoder,
    samples: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    config: TrainConfig | None = None,
    val_queries: Sequence[tuple[str, frozenset]] | None = None,
) -> list[EpochRecord]:
    """Train in place; returns per-epoch history.

    Deterministic given the seed: shuffling and negative draws come from one
    numpy generator, torch is seeded before the first step, and negatives are
    resampled every epoch.
    """
    config = config or TrainConfig()
    if not samples:
        raise TrainingError("no training samples")
    _check_positives(samples)
    for sample in samples:
        for skill_id in sample.skill_ids:
            if skill_id not in taxonomy:
                raise TrainingError(f"sample references unknown skill_id {skill_id!r}")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(
            [p for p in model.parameters() if p.requires_grad], lr=config.learning_rate
        )
    else:
        optimizer = torch.optim.SGD(
            [p for p in model.parameters() if p.requires_grad], lr=config.learning_rate
        )
    history: list[EpochRecord] = []
    model.train()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(samples))
        negatives = draw_epoch_negatives(samples, taxonomy, config, rng)
        losses = []
        cached: dict[str, torch.Tensor] = {}
        for batch_no, batch_start in enumerate(range(0, len(samples), config.batch_size)):
            index = order[batch_start : batch_start + config.batch_size]
            batch = [samples[i] for i in index]
            batch_negs = [negatives[i] for i in index]
            if config.label_refresh_batches > 1 and batch_no % config.label_refresh_batches == 0:
                cached = _refresh_label_cache(model, batch_negs, batch, taxonomy)
            loss = batch_loss(
                model,
                batch,
                batch_negs,
                taxonomy,
                config,
                cached_labels=cached if config.label_refresh_batches > 1 else None,
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch} batch {batch_no}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        elapsed = time.perf_counter() - start
        val = evaluate_mrr(model, val_queries, taxonomy) if val_queries else None
        history.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                val_mrr=val,
                seconds=elapsed,
                samples_per_sec=len(samples) / elapsed if elapsed > 0 else 0.0,
            )
        )
        model.train()
    model.eval()
    return history


def _refresh_label_cache(
    model: BiEncoder,
    batch_negs: Sequence[Sequence[Sequence[str]]],
    batch: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
) -> dict[str, torch.Tensor]:
    needed: set[str] = set()
    for sample, negs in zip(batch, batch_negs):
        needed.update(sample.skill_ids)
        for group in negs:
            needed.update(group)
    ordered = sorted(needed)
    with torch.no_grad():
        embeddings = model([taxonomy.description_of(s) for s in ordered])
    return {skill_id: embeddings[i].detach() for i, skill_id in enumerate(ordered)}


def rank_against_inventory(
    model: BiEncoder, texts: Sequence[str], taxonomy: SkillTaxonomy
) -> list[list[str]]:
    """Rank every skill for each text by embedding dot product.

    Ties break by ascending skill id. Scoring happens in float64 for
    platform-stable ordering.
    """
    skill_matrix = model.embed_batch([s.description for s in taxonomy]).astype(np.float64)
    ids = np.array(taxonomy.ids)
    id_rank = np.argsort(np.argsort(ids))
    rankings = []
    for text in texts:
        sims = skill_matrix @ model.embed(text).astype(np.float64)
        order = np.lexsort((id_rank, -sims))
        rankings.append([str(ids[i]) for i in order])
    return rankings


def evaluate_mrr(
    model: BiEncoder,
    queries: Sequence[tuple[str, frozenset]] | None,
    taxonomy: SkillTaxonomy,
) -> float:
    if not queries:
        raise ValueError("no validation queries")
    rankings = rank_against_inventory(model, [text for text, _ in queries], taxonomy)
    results = [
        RankedResult(query_id=str(i), ranked=tuple(ranked), gold=frozenset(gold))
        for i, ((_, gold), ranked) in enumerate(zip(queries, rankings))
    ]
    return mrr(results)


def measure_throughput(
    model: BiEncoder,
    samples: Sequence[SyntheticSample],
    taxonomy: SkillTaxonomy,
    config: TrainConfig,
    duration: float = 2.0,
    warmup_batches: int = 2,
) -> float:
    """Training throughput in samples/second on a scratch copy of the model.

    Runs full optimization steps (forward, backward, update) over cycling
    batches for at least ``duration`` seconds after warmup.
    """
    if not samples:
        raise TrainingError("no samples to measure")
    if duration <= 0:
        raise ValueError("duration must be positive")
    _check_positives(samples)
    scratch = copy.deepcopy(model)
    scratch.train()
    optimizer = torch.optim.SGD(
        [p for p in scratch.parameters() if p.requires_grad], lr=config.learning_rate
    )
    rng = np.random.default_rng(config.seed)
    batches = []
    for start in range(0, len(samples), config.batch_size):
        batch = list(samples[start : start + config.batch_size])
        negs = [
            [
                sample_negatives(taxonomy, s.skill_ids, config.num_negatives, rng)
                for _ in s.skill_ids
            ]
            for s in batch
        ]
        batches.append((batch, negs))

    def step(batch, negs) -> None:
        loss = batch_loss(scratch, batch, negs, taxonomy, config)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    for i in range(min(warmup_batches, len(batches))):
        step(*batches[i])
    processed = 0
    start_time = time.perf_counter()
    i = 0
    while True:
        batch, negs = batches[i % len(batches)]
        step(batch, negs)
        processed += len(batch)
        i += 1
        elapsed = time.perf_counter() - start_time
        if elapsed >= duration and i >= 1:
            break
    return processed / elapsed
