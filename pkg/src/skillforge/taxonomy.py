"""Skill inventory: CSV loading, validation, grouping, and pair sampling."""

from __future__ import annotations

import csv
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("skill_id", "preferred_label", "description", "level2_id", "level2_label")


class TaxonomyError(ValueError):
    """Malformed taxonomy data (bad header, duplicate ids, empty fields)."""


class SamplingError(ValueError):
    """A pair sampler cannot satisfy its constraints on this inventory."""


@dataclass(frozen=True)
class Skill:
    skill_id: str
    preferred_label: str
    description: str
    level2_id: str
    level2_label: str


class SkillTaxonomy:
    """Immutable skill inventory with a level-2 group partition.

    Skills keep file order; every skill belongs to exactly one group.
    """

    def __init__(self, skills: Sequence[Skill]):
        seen: dict[str, int] = {}
        groups: dict[str, list[str]] = {}
        for row, skill in enumerate(skills, start=1):
            if not skill.skill_id:
                raise TaxonomyError(f"row {row}: empty skill_id")
            if skill.skill_id in seen:
                raise TaxonomyError(
                    f"duplicate skill_id {skill.skill_id!r} (rows {seen[skill.skill_id]} and {row})"
                )
            if not skill.description.strip():
                raise TaxonomyError(f"row {row} (skill_id {skill.skill_id!r}): empty description")
            if not skill.level2_id:
                raise TaxonomyError(f"row {row} (skill_id {skill.skill_id!r}): empty level2_id")
            seen[skill.skill_id] = row
            groups.setdefault(skill.level2_id, []).append(skill.skill_id)
        self._skills = tuple(skills)
        self._by_id = {s.skill_id: s for s in self._skills}
        self._groups = {g: tuple(ids) for g, ids in groups.items()}

    def __len__(self) -> int:
        return len(self._skills)

    def __iter__(self) -> Iterator[Skill]:
        return iter(self._skills)

    def __contains__(self, skill_id: str) -> bool:
        return skill_id in self._by_id

    @property
    def skills(self) -> tuple[Skill, ...]:
        return self._skills

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.skill_id for s in self._skills)

    @property
    def groups(self) -> dict[str, tuple[str, ...]]:
        """level2_id -> skill ids, in file order. A partition of the inventory."""
        return dict(self._groups)

    def get(self, skill_id: str) -> Skill:
        try:
            return self._by_id[skill_id]
        except KeyError:
            raise KeyError(f"unknown skill_id {skill_id!r}") from None

    def description_of(self, skill_id: str) -> str:
        return self.get(skill_id).description


def load_taxonomy(path: str | Path) -> SkillTaxonomy:
    """Read a skill inventory CSV with the fixed five-column schema."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise TaxonomyError(f"{path}: empty file")
        if set(header) != set(CSV_COLUMNS) or len(header) != len(CSV_COLUMNS):
            raise TaxonomyError(
                f"{path}: expected columns {','.join(CSV_COLUMNS)}, got {','.join(header)}"
            )
        skills = []
        for line, row in enumerate(reader, start=2):
            if any(row[c] is None for c in CSV_COLUMNS):
                raise TaxonomyError(f"{path}: line {line}: wrong number of fields")
            skills.append(Skill(**{c: row[c].strip() for c in CSV_COLUMNS}))
    if not skills:
        raise TaxonomyError(f"{path}: no skill rows")
    try:
        return SkillTaxonomy(skills)
    except TaxonomyError as exc:
        raise TaxonomyError(f"{path}: {exc}") from None


def save_taxonomy(taxonomy: SkillTaxonomy, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for s in taxonomy:
            writer.writerow([s.skill_id, s.preferred_label, s.description, s.level2_id, s.level2_label])


def validation_report(taxonomy: SkillTaxonomy) -> dict:
    """Summary stats plus flags that don't abort loading.

    Duplicate descriptions are legal (near-synonym skills exist in real
    inventories) but worth surfacing: they are unresolvable ties for any
    retriever.
    """
    by_description: dict[str, list[str]] = {}
    for s in taxonomy:
        by_description.setdefault(s.description, []).append(s.skill_id)
    duplicates = {d: ids for d, ids in by_description.items() if len(ids) > 1}
    sizes = [len(ids) for ids in taxonomy.groups.values()]
    return {
        "num_skills": len(taxonomy),
        "num_groups": len(sizes),
        "min_group_size": min(sizes),
        "max_group_size": max(sizes),
        "duplicate_description_groups": sorted(sorted(ids) for ids in duplicates.values()),
    }


def sample_constrained_pair(taxonomy: SkillTaxonomy, rng: np.random.Generator) -> tuple[Skill, Skill]:
    """Ordered pair of distinct skills from one level-2 group.

    Uniform over groups with >= 2 members, then uniform over ordered
    distinct pairs inside the chosen group.
    """
    eligible = [ids for ids in taxonomy.groups.values() if len(ids) >= 2]
    if not eligible:
        raise SamplingError("no level-2 group has 2 or more skills")
    group = eligible[int(rng.integers(len(eligible)))]
    i, j = rng.choice(len(group), size=2, replace=False)
    return taxonomy.get(group[int(i)]), taxonomy.get(group[int(j)])


def sample_uniform_pair(taxonomy: SkillTaxonomy, rng: np.random.Generator) -> tuple[Skill, Skill]:
    """Ordered pair of distinct skills, uniform over the whole inventory."""
    if len(taxonomy) < 2:
        raise SamplingError("need at least 2 skills to sample a pair")
    i, j = rng.choice(len(taxonomy), size=2, replace=False)
    return taxonomy.skills[int(i)], taxonomy.skills[int(j)]
