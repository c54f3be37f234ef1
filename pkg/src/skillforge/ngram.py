"""Character n-gram features shared by the filter, baselines, and dedup.

One tokenizer for everything model-adjacent, so comparisons between the
bi-encoder, the lexical baselines, and the QC embedder are not confounded
by preprocessing differences.
"""

from __future__ import annotations

import zlib
from collections import Counter
from collections.abc import Iterable

import numpy as np


def char_ngrams(text: str, lo: int = 2, hi: int = 4) -> list[str]:
    """All contiguous character n-grams of ``text`` for n in [lo, hi].

    Windows slide over the raw string, whitespace included; a text shorter
    than ``lo`` yields nothing.
    """
    if lo < 1 or hi < lo:
        raise ValueError(f"bad n-gram range ({lo}, {hi})")
    grams: list[str] = []
    length = len(text)
    for n in range(lo, hi + 1):
        if length < n:
            break
        grams.extend(text[i : i + n] for i in range(length - n + 1))
    return grams


def ngram_counts(text: str, lo: int = 2, hi: int = 4) -> Counter:
    return Counter(char_ngrams(text, lo, hi))


def _bucket(gram: str, dim: int) -> int:
    # crc32, not hash(): Python salts hash() per process, which would make
    # hashed features differ between runs and break reproducible builds.
    return zlib.crc32(gram.encode("utf-8")) % dim


def hashed_ngram_vector(
    text: str, dim: int = 4096, lo: int = 2, hi: int = 4, normalize: bool = True
) -> np.ndarray:
    """Bag of hashed character n-grams as a dense float64 vector."""
    vec = np.zeros(dim, dtype=np.float64)
    for gram, count in ngram_counts(text, lo, hi).items():
        vec[_bucket(gram, dim)] += count
    if normalize:
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
    return vec


def hashed_ngram_matrix(
    texts: Iterable[str], dim: int = 4096, lo: int = 2, hi: int = 4
) -> np.ndarray:
    rows = [hashed_ngram_vector(t, dim=dim, lo=lo, hi=hi) for t in texts]
    if not rows:
        return np.zeros((0, dim), dtype=np.float64)
    return np.stack(rows)
