"""Dense skill index: build, persist, query, and posting-level prediction.

The index is a row-per-skill matrix of unit-norm float32 embeddings, so
cosine similarity is a dot product. Queries take the top ``budget`` skills
and then drop those under the similarity threshold; posting predictions are
the union of the per-sentence predictions of filtered sentences.
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path

import numpy as np

from .encoder import BiEncoder
from .sentence_filter import FilterModel, apply_filter, segment_posting
from .taxonomy import SkillTaxonomy

INDEX_MAGIC = b"SFIX"
INDEX_VERSION = 1
_UNIT_TOL = 1e-5
DEFAULT_GAMMA_GRID = tuple(round(0.05 * i, 2) for i in range(20))  # 0.00 .. 0.95


class IndexFormatError(ValueError):
    """Unreadable, corrupted, or inconsistent index file."""


@dataclass(frozen=True)
class RetrievalParams:
    budget: int = 50
    threshold: float = -1.0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")


class SkillIndex:
    """Immutable (ids, matrix) pair with scoring done in float64."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray, fingerprint: str = ""):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise IndexFormatError(
                f"matrix shape {matrix.shape} does not match {len(ids)} ids"
            )
        if len(set(ids)) != len(ids):
            raise IndexFormatError("duplicate skill ids in index")
        if matrix.shape[0] == 0:
            raise IndexFormatError("empty index")
        if not np.isfinite(matrix).all():
            raise IndexFormatError("non-finite values in index matrix")
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > _UNIT_TOL:
            raise IndexFormatError(f"index rows must be unit-norm (worst deviation {worst:.2e})")
        self.ids = tuple(str(i) for i in ids)
        self.matrix = matrix
        self.fingerprint = fingerprint
        self._scoring = matrix.astype(np.float64)
        self._id_rank = np.argsort(np.argsort(np.array(self.ids)))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def build_index(model: BiEncoder, taxonomy: SkillTaxonomy, batch_size: int = 64) -> SkillIndex:
    """Embed every skill description; failures name the offending skill."""
    for skill in taxonomy:
        if not model.vocab.encode(skill.description):
            raise ValueError(
                f"skill {skill.skill_id!r}: description tokenizes to zero tokens"
            )
    matrix = model.embed_batch([s.description for s in taxonomy], batch_size=batch_size)
    return SkillIndex(taxonomy.ids, matrix, fingerprint=model.fingerprint())


def query(
    index: SkillIndex, embedding: np.ndarray, params: RetrievalParams | None = None
) -> list[tuple[str, float]]:
    """Top-``budget`` skills by similarity, descending, then threshold-filtered.

    Ties break by ascending skill id. Returns (skill_id, similarity) pairs.
    """
    params = params or RetrievalParams()
    vec = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if vec.shape[0] != index.dim:
        raise ValueError(f"query dim {vec.shape[0]} != index dim {index.dim}")
    sims = index._scoring @ vec
    order = np.lexsort((index._id_rank, -sims))[: params.budget]
    return [
        (index.ids[i], float(sims[i])) for i in order if sims[i] >= params.threshold
    ]


def serialize_index(index: SkillIndex) -> bytes:
    out = BytesIO()
    out.write(INDEX_MAGIC)
    out.write(struct.pack("<I", INDEX_VERSION))
    out.write(struct.pack("<I", index.dim))
    out.write(struct.pack("<I", len(index)))
    fp = index.fingerprint.encode("utf-8")
    out.write(struct.pack("<H", len(fp)))
    out.write(fp)
    for skill_id in index.ids:
        encoded = skill_id.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
    out.write(index.matrix.astype("<f4").tobytes())
    return out.getvalue()


def save_index(index: SkillIndex, path: str | Path) -> None:
    Path(path).write_bytes(serialize_index(index))


def load_index(path: str | Path) -> SkillIndex:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"index not found: {path}")
    buf = BytesIO(path.read_bytes())

    def read(n: int, what: str) -> bytes:
        data = buf.read(n)
        if len(data) != n:
            raise IndexFormatError(f"{path}: truncated while reading {what}")
        return data

    if read(4, "magic") != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", read(4, "version"))
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version}")
    (dim,) = struct.unpack("<I", read(4, "dim"))
    (count,) = struct.unpack("<I", read(4, "count"))
    (fp_len,) = struct.unpack("<H", read(2, "fingerprint length"))
    fingerprint = read(fp_len, "fingerprint").decode("utf-8")
    ids = []
    for i in range(count):
        (id_len,) = struct.unpack("<H", read(2, f"id length {i}"))
        ids.append(read(id_len, f"id {i}").decode("utf-8"))
    raw = read(count * dim * 4, "matrix")
    if buf.read(1):
        raise IndexFormatError(f"{path}: trailing bytes after matrix")
    matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    try:
        return SkillIndex(ids, matrix, fingerprint=fingerprint)
    except IndexFormatError as exc:
        raise IndexFormatError(f"{path}: {exc}") from None


# --- posting-level prediction -------------------------------------------------


@dataclass(frozen=True)
class SentencePrediction:
    text: str
    skills: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class PostingPrediction:
    """Union of per-sentence predictions with max-similarity diagnostics."""

    sentences: tuple[SentencePrediction, ...]
    ranked: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    @property
    def skill_ids(self) -> frozenset[str]:
        return frozenset(skill_id for skill_id, _ in self.ranked)

    def top_k(self, k: int) -> list[str]:
        return [skill_id for skill_id, _ in self.ranked[:k]]


def _union_ranked(sentences: Sequence[SentencePrediction]) -> tuple[tuple[str, float], ...]:
    best: dict[str, float] = {}
    for sentence in sentences:
        for skill_id, sim in sentence.skills:
            if skill_id not in best or sim > best[skill_id]:
                best[skill_id] = sim
    return tuple(sorted(best.items(), key=lambda item: (-item[1], item[0])))


def predict_sentence(
    model: BiEncoder, index: SkillIndex, sentence: str, params: RetrievalParams | None = None
) -> SentencePrediction:
    matches = query(index, model.embed(sentence), params)
    return SentencePrediction(text=sentence, skills=tuple(matches))


def predict_posting(
    filter_model: FilterModel | None,
    model: BiEncoder,
    index: SkillIndex,
    text: str,
    relevance_threshold: float | None = None,
    params: RetrievalParams | None = None,
) -> PostingPrediction:
    """Segment, filter, retrieve per sentence, and union the results.

    With ``filter_model=None`` every sentence is retrieved (filter ablation).
    A posting with no surviving sentences yields an empty prediction.
    """
    segments = segment_posting(text)
    if filter_model is not None:
        segments = apply_filter(filter_model, segments, threshold=relevance_threshold)
    sentences = tuple(predict_sentence(model, index, s, params) for s in segments)
    return PostingPrediction(sentences=sentences, ranked=_union_ranked(sentences))


@dataclass(frozen=True)
class GammaSelection:
    gamma: float
    f1: float
    all_zero: bool


def _posting_f1_at_k(predicted: Sequence[tuple[str, float]], gold: frozenset, k: int) -> float:
    top = [skill_id for skill_id, _ in predicted[:k]]
    if not gold:
        raise ValueError("empty gold set in tuning data")
    hits = len(set(top) & gold)
    precision = hits / min(k, len(top)) if top else 0.0
    recall = hits / len(gold)
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def tune_gamma(
    predict_fn: Callable[[float], Sequence[Sequence[tuple[str, float]]]],
    golds: Sequence[frozenset],
    grid: Sequence[float] | None = None,
    k: int = 5,
) -> GammaSelection:
    """Pick the similarity threshold maximizing posting-level F1@k.

    ``predict_fn(gamma)`` returns one ranked (skill_id, score) list per dev
    posting, aligned with ``golds``. Ties prefer the smaller gamma; if every
    candidate scores zero the smallest gamma is returned flagged.
    """
    grid = sorted(grid) if grid is not None else list(DEFAULT_GAMMA_GRID)
    if not grid:
        raise ValueError("empty gamma grid")
    if not golds:
        raise ValueError("no dev postings")
    best_gamma, best_f1 = None, -1.0
    for gamma in grid:
        predictions = predict_fn(gamma)
        if len(predictions) != len(golds):
            raise ValueError("predict_fn returned a misaligned prediction list")
        f1 = float(
            np.mean([_posting_f1_at_k(p, g, k) for p, g in zip(predictions, golds)])
        )
        if f1 > best_f1:
            best_gamma, best_f1 = gamma, f1
    all_zero = best_f1 <= 0.0
    if all_zero:
        best_gamma = grid[0]
        best_f1 = 0.0
    return GammaSelection(gamma=float(best_gamma), f1=best_f1, all_zero=all_zero)
