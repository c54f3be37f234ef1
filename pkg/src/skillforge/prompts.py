"""Prompt construction and decoding profiles for supervision synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field

from .taxonomy import Skill

VARIANTS = ("single", "multi_constrained", "multi_random", "none")

SYSTEM_INSTRUCTION = (
    "You are an experienced recruitment ad copywriter expert, good at generating "
    "recruitment ad sentences based on skills. Please respond by generating sentences "
    "used in hypothetical recruitment ads based on user requirements, representing the "
    "demand for specific skills. Ensure diversity in the generated sentences and do not "
    "repeat sentences or structures."
)

# Appended for skills whose descriptions sit in dense semantic neighborhoods,
# where generic phrasing would be indistinguishable from dozens of neighbors.
CONTEXT_ANCHOR_SUFFIX = (
    "Anchor every sentence in a concrete job context: name the role, task, or project "
    "in which the skill is exercised, and avoid generic claims that could describe any skill."
)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.7
    top_p: float = 0.9
    max_tokens: int = 128
    presence_penalty: float = 0.0

    def __post_init__(self) -> None:
        if self.temperature < 0.0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if not 1 <= self.max_tokens <= 512:
            raise ValueError(f"max_tokens must be in [1, 512], got {self.max_tokens}")

    @classmethod
    def high_diversity(cls) -> "DecodingParams":
        """Hotter profile that pushes against template-like repetition."""
        return cls(temperature=0.9, top_p=0.9, max_tokens=128, presence_penalty=0.8)


@dataclass(frozen=True)
class GenerationSpec:
    """One generation request: which skills (if any), how many sentences."""

    variant: str
    skills: tuple[Skill, ...] = ()
    n_sentences: int = 1
    decoding: DecodingParams = field(default_factory=DecodingParams)
    context_anchors: bool = False

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        expected = {"single": 1, "multi_constrained": 2, "multi_random": 2, "none": 0}[self.variant]
        if len(self.skills) != expected:
            raise ValueError(
                f"variant {self.variant!r} takes {expected} skills, got {len(self.skills)}"
            )
        if self.n_sentences < 1:
            raise ValueError(f"n_sentences must be >= 1, got {self.n_sentences}")


@dataclass(frozen=True)
class PromptMessages:
    system: str
    user: str


def render_prompt(spec: GenerationSpec) -> PromptMessages:
    lines = [f"Number of sentences: {spec.n_sentences}"]
    if spec.variant == "single":
        (skill,) = spec.skills
        lines.append(f"Skill: {skill.preferred_label}")
        lines.append(f"Definition: {skill.description}")
    elif spec.variant in ("multi_constrained", "multi_random"):
        for i, skill in enumerate(spec.skills, start=1):
            lines.append(f"Skill {i}: {skill.preferred_label}")
            lines.append(f"Definition {i}: {skill.description}")
    else:
        lines.append("Do not include any requirements regarding labor skills.")
    if spec.context_anchors:
        lines.append(CONTEXT_ANCHOR_SUFFIX)
    return PromptMessages(system=SYSTEM_INSTRUCTION, user="\n".join(lines))
