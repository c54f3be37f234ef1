"""Shared fixtures for the test suite.

Everything here is intentionally tiny; heavyweight trained fixtures live in
test_acceptance.py where they are shared across the criteria that need them.
"""

import random

import pytest

from skillforge.taxonomy import Skill, SkillTaxonomy
from skillforge.toydata import toy_taxonomy


@pytest.fixture(scope="session")
def toy_tax() -> SkillTaxonomy:
    # 5 groups x 10 skills, pseudo-word labels.
    return toy_taxonomy()


@pytest.fixture()
def tiny_tax() -> SkillTaxonomy:
    """Six handmade skills across two groups, stable ids and descriptions."""
    return SkillTaxonomy(
        [
            Skill("A1", "python", "Writes python services and scripts.", "GA", "software"),
            Skill("A2", "sql", "Designs sql schemas and queries.", "GA", "software"),
            Skill("A3", "docker", "Packages services with docker images.", "GA", "software"),
            Skill("B1", "welding", "Performs mig and tig welding work.", "GB", "trades"),
            Skill("B2", "forklift", "Operates forklift trucks in a warehouse.", "GB", "trades"),
            Skill("B3", "painting", "Applies industrial paint coatings.", "GB", "trades"),
        ]
    )


@pytest.fixture()
def rng() -> random.Random:
    return random.Random(0)
