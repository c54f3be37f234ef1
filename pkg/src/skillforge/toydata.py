"""Deterministic toy corpora for tests and offline demos.

The generated inventory uses pseudo-word "marker" labels built from one
consonant set while the stub client's paraphrase aliases use a disjoint set,
with strict consonant-vowel alternation on both sides. Aliased sentences
therefore share no character 2..4-gram with the true description: a string
or tf-idf matcher gets no signal, while an encoder trained on co-occurrence
does. Run ``python -m skillforge.toydata out/`` to materialize files.
"""

from __future__ import annotations

import hashlib
import sys
from pathlib import Path

import numpy as np

from .syngen import SyntheticSample
from .taxonomy import Skill, SkillTaxonomy, save_taxonomy

_MARKER_CONSONANTS = "bcdfg"
_VOWELS = "aeiou"


def _marker(key: str) -> str:
    digest = hashlib.sha256(f"marker|{key}".encode("utf-8")).digest()
    chars = []
    for i in range(3):
        chars.append(_MARKER_CONSONANTS[digest[2 * i] % len(_MARKER_CONSONANTS)])
        chars.append(_VOWELS[digest[2 * i + 1] % len(_VOWELS)])
    return "".join(chars)


def toy_taxonomy(num_groups: int = 5, skills_per_group: int = 10) -> SkillTaxonomy:
    """Small inventory with unique two-marker labels and level-2 groups."""
    skills = []
    used: set[str] = set()
    for group in range(num_groups):
        for member in range(skills_per_group):
            salt = 0
            while True:
                label = f"{_marker(f'{group}.{member}.{salt}a')} {_marker(f'{group}.{member}.{salt}b')}"
                if label not in used:
                    used.add(label)
                    break
                salt += 1
            extra = _marker(f"extra.{group}.{member}")
            skills.append(
                Skill(
                    skill_id=f"S{group:02d}{member:02d}",
                    preferred_label=label,
                    description=f"Working knowledge of {label} covering {extra} duties in production.",
                    level2_id=f"G{group:02d}",
                    level2_label=f"Group {group:02d}",
                )
            )
    return SkillTaxonomy(skills)


def large_toy_taxonomy(num_skills: int = 600) -> SkillTaxonomy:
    """Bigger inventory for cost-scaling measurements; 20 skills per group."""
    per_group = 20
    return toy_taxonomy(num_groups=(num_skills + per_group - 1) // per_group, skills_per_group=per_group)


def toy_postings(
    samples: list[SyntheticSample],
    none_samples: list[SyntheticSample],
    sentences_per_posting: int = 3,
    seed: int = 42,
) -> list[dict]:
    """Group labeled sentences into pseudo-postings with union gold sets.

    Each posting concatenates a few skill sentences plus one no-skill
    sentence, joined with terminal punctuation, matching the
    ``{"posting_id", "text", "skill_ids"}`` annotation schema.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    postings = []
    for start in range(0, len(order) - sentences_per_posting + 1, sentences_per_posting):
        chosen = [samples[i] for i in order[start : start + sentences_per_posting]]
        parts = [s.text.rstrip("。．.！!？?") for s in chosen]
        if none_samples:
            filler = none_samples[int(rng.integers(len(none_samples)))]
            position = int(rng.integers(len(parts) + 1))
            parts.insert(position, filler.text.rstrip("。．.！!？?"))
        gold = sorted({skill_id for s in chosen for skill_id in s.skill_ids})
        postings.append(
            {
                "posting_id": f"P{len(postings):04d}",
                "text": ". ".join(parts) + ".",
                "skill_ids": gold,
            }
        )
    return postings


def main(argv: list[str] | None = None) -> int:
    args = argv if argv is not None else sys.argv[1:]
    out_dir = Path(args[0]) if args else Path("toy_data")
    out_dir.mkdir(parents=True, exist_ok=True)
    taxonomy = toy_taxonomy()
    save_taxonomy(taxonomy, out_dir / "taxonomy.csv")
    print(f"wrote {out_dir / 'taxonomy.csv'} ({len(taxonomy)} skills)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
