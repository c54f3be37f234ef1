"""Synthetic supervision: generate, parse, QC, and assemble the dataset.

Four sample variants: ``single`` (one skill per sentence), two ``multi``
forms (two skills per sentence, drawn from the same level-2 group or fully
at random), and ``none`` (sentences with no skill demand, the filter's
negatives). Quality control removes duplicates and near-duplicates and
resamples skills whose sentences collapse into repeated phrasing.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .llm import ClientError, LLMClient
from .ngram import hashed_ngram_vector
from .prompts import VARIANTS, DecodingParams, GenerationSpec, render_prompt
from .taxonomy import SkillTaxonomy, sample_constrained_pair, sample_uniform_pair

logger = logging.getLogger(__name__)

_SKILLS_PER_VARIANT = {"single": 1, "multi_constrained": 2, "multi_random": 2, "none": 0}
# Bullet ("- ", "• ", "* ") and numbered ("1. ", "2)", "3、") list markers.
_MARKER_RE = re.compile(r"^\s*(?:[-–—•*]\s+|\d{1,3}\s*[.)、．]\s*)")
_NONE_CHUNK = 50  # cap sentences per request so short decoding budgets stay plausible


class GenerationError(RuntimeError):
    """All attempts for one spec failed; carries the spec for diagnosis."""

    def __init__(self, message: str, spec: GenerationSpec):
        super().__init__(message)
        self.spec = spec


@dataclass(frozen=True)
class SyntheticSample:
    text: str
    skill_ids: tuple[str, ...]
    variant: str
    source: str

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.skill_ids) != _SKILLS_PER_VARIANT[self.variant]:
            raise ValueError(
                f"variant {self.variant!r} carries {_SKILLS_PER_VARIANT[self.variant]} "
                f"skill ids, got {len(self.skill_ids)}"
            )
        if not self.text:
            raise ValueError("empty sample text")


class SyntheticDataset:
    """Samples partitioned by variant; every sample sits in exactly one part."""

    def __init__(self, samples: Sequence[SyntheticSample]):
        self.samples = tuple(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def partition(self, variant: str) -> tuple[SyntheticSample, ...]:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        return tuple(s for s in self.samples if s.variant == variant)

    @property
    def singles(self) -> tuple[SyntheticSample, ...]:
        return self.partition("single")

    @property
    def multis(self) -> tuple[SyntheticSample, ...]:
        return tuple(s for s in self.samples if s.variant in ("multi_constrained", "multi_random"))

    @property
    def nones(self) -> tuple[SyntheticSample, ...]:
        return self.partition("none")

    @property
    def positives(self) -> tuple[SyntheticSample, ...]:
        """Samples that carry at least one skill: the encoder's training set."""
        return tuple(s for s in self.samples if s.skill_ids)

    def save_jsonl(self, path: str | Path) -> None:
        save_samples_jsonl(self.samples, path)

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "SyntheticDataset":
        return cls(load_samples_jsonl(path))


def save_samples_jsonl(samples: Iterable[SyntheticSample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "text": s.text,
                "skill_ids": list(s.skill_ids),
                "variant": s.variant,
                "source": s.source,
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_samples_jsonl(path: str | Path) -> list[SyntheticSample]:
    samples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                samples.append(
                    SyntheticSample(
                        text=record["text"],
                        skill_ids=tuple(record["skill_ids"]),
                        variant=record["variant"],
                        source=record.get("source", "llm"),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {line_no}: {exc}") from exc
    return samples


def parse_llm_output(raw: str) -> list[str]:
    """Split raw completion text into clean sentences.

    One sentence per line; leading bullet/number markers and surrounding
    whitespace are stripped; blank lines are dropped.
    """
    sentences = []
    for line in raw.splitlines():
        cleaned = _MARKER_RE.sub("", line, count=1).strip()
        if cleaned:
            sentences.append(cleaned)
    return sentences


@dataclass
class GenerationResult:
    samples: list[SyntheticSample]
    shortfall: int
    attempts: int


def generate_samples(
    client: LLMClient,
    spec: GenerationSpec,
    retries: int = 2,
    source: str = "llm",
    nonce_prefix: str = "",
) -> GenerationResult:
    """Request ``spec.n_sentences`` sentences, retrying on failure or shortage.

    ``retries`` extra attempts top up under-delivery; remaining shortage is
    reported, not raised. Only a total transport failure raises.
    """
    messages = render_prompt(spec)
    skill_ids = tuple(sorted(s.skill_id for s in spec.skills))
    texts: list[str] = []
    seen: set[str] = set()
    errors: list[Exception] = []
    attempts = 0
    for attempt in range(retries + 1):
        if len(texts) >= spec.n_sentences:
            break
        attempts += 1
        try:
            raw = client.complete(messages, spec.decoding, nonce=f"{nonce_prefix}attempt{attempt}")
        except ClientError as exc:
            errors.append(exc)
            continue
        for sentence in parse_llm_output(raw):
            if sentence not in seen and len(texts) < spec.n_sentences:
                seen.add(sentence)
                texts.append(sentence)
    if not texts and errors and len(errors) == attempts:
        raise GenerationError(
            f"all {attempts} attempts failed for variant {spec.variant!r} "
            f"(skills {', '.join(skill_ids) or 'none'}): {errors[-1]}",
            spec,
        ) from errors[-1]
    samples = [
        SyntheticSample(text=t, skill_ids=skill_ids, variant=spec.variant, source=source)
        for t in texts
    ]
    return GenerationResult(samples=samples, shortfall=spec.n_sentences - len(texts), attempts=attempts)


# --- quality control --------------------------------------------------------

Embedder = Callable[[str], np.ndarray]


def default_qc_embedder(text: str) -> np.ndarray:
    return hashed_ngram_vector(text, dim=4096, lo=2, hi=4)


def dedup(
    samples: Sequence[SyntheticSample],
    embedder: Embedder | None = None,
    cutoff: float = 0.95,
) -> tuple[list[SyntheticSample], int]:
    """Drop exact duplicates, then greedy cosine near-duplicates.

    First occurrence wins. A sample whose embedding fails is dropped with a
    warning rather than aborting the build. Returns (kept, removed_count).
    """
    if not 0.0 < cutoff <= 1.0:
        raise ValueError(f"cutoff must be in (0, 1], got {cutoff}")
    embedder = embedder or default_qc_embedder
    kept: list[SyntheticSample] = []
    kept_vecs: list[np.ndarray] = []
    removed = 0
    seen_texts: set[str] = set()
    for sample in samples:
        if sample.text in seen_texts:
            removed += 1
            continue
        seen_texts.add(sample.text)
        try:
            vec = np.asarray(embedder(sample.text), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - QC must not kill the build
            logger.warning("dropping sample with failing embedder: %s", exc)
            removed += 1
            continue
        norm = float(np.linalg.norm(vec))
        unit = vec / norm if norm > 0.0 else vec
        if kept_vecs:
            sims = np.stack(kept_vecs) @ unit
            if float(sims.max()) >= cutoff:
                removed += 1
                continue
        kept.append(sample)
        kept_vecs.append(unit)
    return kept, removed


@dataclass(frozen=True)
class DiversityViolation:
    ngram: str
    count: int
    sentence_indices: tuple[int, ...]


def ngram_diversity_violations(
    texts: Sequence[str], n: int = 4, max_repeats: int = 3
) -> list[DiversityViolation]:
    """Character n-grams shared by more than ``max_repeats`` distinct sentences.

    Input is the sentence set of one label; output is sorted by n-gram for
    determinism. ``n`` must be >= 2 (unigrams are noise, not phrasing).
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if max_repeats < 1:
        raise ValueError(f"max_repeats must be >= 1, got {max_repeats}")
    occurrences: dict[str, set[int]] = {}
    for idx, text in enumerate(texts):
        for i in range(len(text) - n + 1):
            occurrences.setdefault(text[i : i + n], set()).add(idx)
    return [
        DiversityViolation(ngram=g, count=len(idxs), sentence_indices=tuple(sorted(idxs)))
        for g, idxs in sorted(occurrences.items())
        if len(idxs) > max_repeats
    ]


def _mask_labels(text: str, labels: Sequence[str]) -> str:
    # The conditioning skill term legitimately repeats across its own
    # sentences; only phrasing outside it counts as a style artifact.
    for label in labels:
        if label:
            text = text.replace(label, " ")
    return text


def _diversity_drops(texts: Sequence[str], labels: Sequence[str], n: int, max_repeats: int) -> set[int]:
    masked = [_mask_labels(t, labels) for t in texts]
    drops: set[int] = set()
    for violation in ngram_diversity_violations(masked, n=n, max_repeats=max_repeats):
        survivors = [i for i in violation.sentence_indices if i not in drops]
        drops.update(survivors[max_repeats:])
    return drops


# --- dataset assembly -------------------------------------------------------


@dataclass(frozen=True)
class DatasetCounts:
    per_skill: int = 10
    constrained_pairs: int = 0
    random_pairs: int = 0
    per_pair: int = 5
    none_count: int = 0

    def __post_init__(self) -> None:
        for name in ("per_skill", "constrained_pairs", "random_pairs", "per_pair", "none_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class QcParams:
    dedup_cutoff: float = 0.95
    diversity_n: int = 4
    diversity_max_repeats: int = 3
    resample_budget: int = 3
    ambiguity_sim: float = 0.9
    ambiguity_neighbors: int = 20
    embedder: Embedder | None = None


@dataclass
class BuildReport:
    requested: dict[str, int] = field(default_factory=dict)
    delivered: dict[str, int] = field(default_factory=dict)
    under_represented: list[dict] = field(default_factory=list)
    removed_duplicates: int = 0
    diversity_dropped: int = 0
    ambiguous_skills: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "requested": dict(self.requested),
            "delivered": dict(self.delivered),
            "under_represented": list(self.under_represented),
            "removed_duplicates": self.removed_duplicates,
            "diversity_dropped": self.diversity_dropped,
            "ambiguous_skills": list(self.ambiguous_skills),
        }


def find_ambiguous_skills(taxonomy: SkillTaxonomy, qc: QcParams) -> list[str]:
    """Skills whose description has many near-identical neighbors.

    Measured with the QC embedder; such skills get stricter diversity limits
    and context-anchored prompts, since generic sentences about them would be
    indistinguishable from their neighbors.
    """
    if len(taxonomy) <= qc.ambiguity_neighbors:
        return []
    embedder = qc.embedder or default_qc_embedder
    matrix = np.stack([embedder(s.description) for s in taxonomy])
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    matrix = matrix / norms
    ambiguous = []
    chunk = 512
    for start in range(0, matrix.shape[0], chunk):
        sims = matrix[start : start + chunk] @ matrix.T
        counts = (sims >= qc.ambiguity_sim).sum(axis=1) - 1  # minus self
        for offset, count in enumerate(counts):
            if count >= qc.ambiguity_neighbors:
                ambiguous.append(taxonomy.skills[start + offset].skill_id)
    return ambiguous


def _build_label_group(
    client: LLMClient,
    make_spec: Callable[[int, bool], GenerationSpec],
    labels: Sequence[str],
    target: int,
    qc: QcParams,
    source: str,
    nonce_key: str,
    ambiguous: bool,
    report: BuildReport,
) -> list[SyntheticSample]:
    """Generate-QC-resample loop for the sentences of one label (or pair)."""
    max_repeats = qc.diversity_max_repeats
    if ambiguous:
        max_repeats = max(1, max_repeats // 2)
    kept: list[SyntheticSample] = []
    for attempt in range(qc.resample_budget + 1):
        need = target - len(kept)
        if need <= 0:
            break
        spec = make_spec(need, ambiguous)
        result = generate_samples(
            client, spec, source=source, nonce_prefix=f"{nonce_key}|round{attempt}|"
        )
        merged, removed = dedup(kept + result.samples, qc.embedder, qc.dedup_cutoff)
        report.removed_duplicates += removed
        drops = _diversity_drops(
            [s.text for s in merged], labels, qc.diversity_n, max_repeats
        )
        report.diversity_dropped += len(drops)
        kept = [s for i, s in enumerate(merged) if i not in drops]
    report.requested[nonce_key] = target
    report.delivered[nonce_key] = len(kept)
    if len(kept) < target:
        report.under_represented.append(
            {"key": nonce_key, "requested": target, "delivered": len(kept)}
        )
    return kept


def build_dataset(
    taxonomy: SkillTaxonomy,
    client: LLMClient,
    counts: DatasetCounts,
    decoding: DecodingParams | None = None,
    qc: QcParams | None = None,
    rng: np.random.Generator | None = None,
    source: str = "llm",
) -> tuple[SyntheticDataset, BuildReport]:
    """Assemble all four partitions with QC applied per label group.

    Deterministic given the client, taxonomy order, and ``rng`` state: pair
    draws come from ``rng`` and all request nonces are content-derived.
    """
    decoding = decoding or DecodingParams()
    qc = qc or QcParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    report = BuildReport()
    report.ambiguous_skills = find_ambiguous_skills(taxonomy, qc)
    ambiguous_set = set(report.ambiguous_skills)
    samples: list[SyntheticSample] = []

    for skill in taxonomy:
        if counts.per_skill <= 0:
            break
        samples.extend(
            _build_label_group(
                client,
                lambda n, anchors, skill=skill: GenerationSpec(
                    variant="single",
                    skills=(skill,),
                    n_sentences=n,
                    decoding=decoding,
                    context_anchors=anchors,
                ),
                labels=[skill.preferred_label],
                target=counts.per_skill,
                qc=qc,
                source=source,
                nonce_key=f"single|{skill.skill_id}",
                ambiguous=skill.skill_id in ambiguous_set,
                report=report,
            )
        )

    for variant, n_pairs, sampler in (
        ("multi_constrained", counts.constrained_pairs, sample_constrained_pair),
        ("multi_random", counts.random_pairs, sample_uniform_pair),
    ):
        for pair_no in range(n_pairs):
            first, second = sampler(taxonomy, rng)
            ambiguous = first.skill_id in ambiguous_set or second.skill_id in ambiguous_set
            samples.extend(
                _build_label_group(
                    client,
                    lambda n, anchors, pair=(first, second): GenerationSpec(
                        variant=variant,
                        skills=pair,
                        n_sentences=n,
                        decoding=decoding,
                        context_anchors=anchors,
                    ),
                    labels=[first.preferred_label, second.preferred_label],
                    target=counts.per_pair,
                    qc=qc,
                    source=source,
                    nonce_key=f"{variant}|{pair_no}|{first.skill_id}+{second.skill_id}",
                    ambiguous=ambiguous,
                    report=report,
                )
            )

    none_kept: list[SyntheticSample] = []
    chunk_no = 0
    while len(none_kept) < counts.none_count and chunk_no < (counts.none_count // _NONE_CHUNK + 1) * 3:
        need = min(_NONE_CHUNK, counts.none_count - len(none_kept))
        spec = GenerationSpec(variant="none", n_sentences=need, decoding=decoding)
        result = generate_samples(client, spec, source=source, nonce_prefix=f"none|chunk{chunk_no}|")
        merged, removed = dedup(none_kept + result.samples, qc.embedder, qc.dedup_cutoff)
        report.removed_duplicates += removed
        none_kept = merged
        chunk_no += 1
    if counts.none_count:
        report.requested["none"] = counts.none_count
        report.delivered["none"] = len(none_kept)
        if len(none_kept) < counts.none_count:
            report.under_represented.append(
                {"key": "none", "requested": counts.none_count, "delivered": len(none_kept)}
            )
    samples.extend(none_kept)

    # Cross-label safety net: identical texts can slip in between groups.
    unique: list[SyntheticSample] = []
    seen: set[str] = set()
    for s in samples:
        if s.text in seen:
            report.removed_duplicates += 1
            continue
        seen.add(s.text)
        unique.append(s)
    return SyntheticDataset(unique), report
