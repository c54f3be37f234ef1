"""Text-generation clients: a real chat-completion endpoint and an offline stub.

Clients return the raw assistant text; parsing into sentences happens in
``syngen``. ``complete`` takes a caller-chosen ``nonce`` so that stochastic
behavior in the stub is a pure function of (seed, prompt, nonce) — resampling
retries get fresh text, yet builds stay bit-reproducible and safe to run
concurrently. The HTTP client ignores the nonce.
"""

from __future__ import annotations

import hashlib
import os
import random
import re
import time
from dataclasses import dataclass
from typing import Callable, Protocol

import requests

from .prompts import DecodingParams, PromptMessages


class ClientError(RuntimeError):
    """Transport or protocol failure talking to a generation backend."""


class LLMClient(Protocol):
    def complete(self, messages: PromptMessages, decoding: DecodingParams, nonce: str = "") -> str:
        ...


@dataclass(frozen=True)
class HttpClientConfig:
    endpoint: str
    model: str
    api_key_env: str = "SKILLFORGE_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0


class HttpChatClient:
    """Chat-completions client over HTTP with exponential backoff.

    ``session`` and ``sleep`` are injectable so tests can run without a
    network or a clock.
    """

    def __init__(
        self,
        config: HttpClientConfig,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._config = config
        self._session = session or requests.Session()
        self._sleep = sleep

    def complete(self, messages: PromptMessages, decoding: DecodingParams, nonce: str = "") -> str:
        payload = {
            "model": self._config.model,
            "messages": [
                {"role": "system", "content": messages.system},
                {"role": "user", "content": messages.user},
            ],
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "max_tokens": decoding.max_tokens,
            "presence_penalty": decoding.presence_penalty,
        }
        headers = {}
        api_key = os.environ.get(self._config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error: Exception | None = None
        for attempt in range(self._config.max_retries + 1):
            if attempt:
                self._sleep(self._config.backoff * 2 ** (attempt - 1))
            try:
                response = self._session.post(
                    self._config.endpoint, json=payload, headers=headers, timeout=self._config.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code in (429, 500, 502, 503, 504):
                last_error = ClientError(f"HTTP {response.status_code} from {self._config.endpoint}")
                continue
            if response.status_code != 200:
                raise ClientError(f"HTTP {response.status_code} from {self._config.endpoint}")
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ClientError(f"malformed completion payload: {exc}") from exc
        raise ClientError(
            f"request failed after {self._config.max_retries + 1} attempts: {last_error}"
        ) from last_error


# --- offline stub -----------------------------------------------------------

_SINGLE_TEMPLATES = (
    "Proven experience with {a} is required for this position.",
    "The ideal candidate shows a strong command of {a}.",
    "We expect hands-on familiarity with {a} in daily work.",
    "Applicants should demonstrate solid {a} capabilities.",
    "Day-to-day duties lean heavily on {a}.",
    "A track record of applying {a} on shipped projects is essential.",
    "You will own deliverables that depend on {a}.",
    "Comfort working with {a} under tight deadlines is a must.",
    "Our team values depth in {a} over breadth.",
    "Success in this role hinges on dependable {a}.",
    "Expect to mentor juniors in {a} from your first quarter.",
    "Strong {a} fundamentals will set your application apart.",
    "Customers rely on our {a} expertise every single day.",
    "Interviews will probe real {a} scenarios, not trivia.",
    "Bring practical {a} judgment earned in messy situations.",
    "Most sprints include at least one {a} deliverable.",
    "Promotion here rewards visible {a} impact.",
    "Your onboarding plan centers on our {a} stack.",
)

_MULTI_TEMPLATES = (
    "This position combines {a} with {b} across the product lifecycle.",
    "You will split your week between {a} and {b}.",
    "Shipping features here means pairing {a} with {b}.",
    "We need someone fluent in both {a} and {b}.",
    "The role alternates between {a} duties and {b} work.",
    "Candidates should bring {a} plus a working grasp of {b}.",
    "Senior staff here blend {a} with {b} daily.",
    "Projects demand {a} first, then {b} to finish.",
    "Hiring managers want proof of {a} and of {b}.",
    "Growth paths reward investing in {a} alongside {b}.",
)

_NONE_TEMPLATES = (
    "We offer {a} and {b} to every employee.",
    "Our office sits near {a} with easy access to {b}.",
    "Enjoy {a} alongside {b} from day one.",
    "The company provides {a} as well as {b}.",
    "Join a team known for {a} and {b}.",
    "Benefits include {a} together with {b}.",
)

_NONE_FILLERS = (
    "a competitive salary",
    "an annual bonus",
    "flexible hours",
    "a supportive culture",
    "full medical insurance",
    "generous paid leave",
    "a commuter subsidy",
    "free catered lunches",
    "a learning stipend",
    "quarterly team retreats",
    "a modern downtown campus",
    "hybrid remote options",
    "stock participation",
    "an on-site gym",
    "childcare assistance",
    "regular hack weeks",
)

_ALIAS_CONSONANTS = "klmnprstvz"
_VOWELS = "aeiou"
_FIELD_RE = re.compile(r"^(Skill(?: \d)?|Definition(?: \d)?|Number of sentences): ?(.*)$")


def paraphrase_alias(label: str, variant: int) -> str:
    """Deterministic pseudo-word standing in for ``label``.

    Consonant-vowel alternation over a fixed consonant set, so an alias
    shares no character 2..4-gram with words built from a disjoint set.
    """
    digest = hashlib.sha256(f"alias|{label}|{variant}".encode("utf-8")).digest()
    chars = []
    for i in range(4):
        chars.append(_ALIAS_CONSONANTS[digest[2 * i] % len(_ALIAS_CONSONANTS)])
        chars.append(_VOWELS[digest[2 * i + 1] % len(_VOWELS)])
    return "".join(chars)


def _parse_user_prompt(user: str) -> tuple[int, list[str], bool]:
    """Recover (n_sentences, skill labels, is_none_variant) from a rendered prompt."""
    n = 1
    labels: list[str] = []
    none_variant = False
    for line in user.splitlines():
        match = _FIELD_RE.match(line)
        if match:
            key, value = match.group(1), match.group(2)
            if key == "Number of sentences":
                n = int(value)
            elif key.startswith("Skill"):
                labels.append(value)
        elif line.startswith("Do not include any requirements"):
            none_variant = True
    return n, labels, none_variant


class StubLLMClient:
    """Offline generator emulating the chat endpoint's response format.

    Emits the same bullet-list shape a real model returns, so the parsing
    path is exercised identically. With ``paraphrase_rate`` > 0, some
    sentences replace the skill label with one of ``alias_variants``
    deterministic pseudo-words — lexical-overlap-free mentions that a
    string matcher cannot resolve but a trained encoder can.
    """

    def __init__(self, seed: int = 0, paraphrase_rate: float = 0.0, alias_variants: int = 3):
        if not 0.0 <= paraphrase_rate <= 1.0:
            raise ValueError(f"paraphrase_rate must be in [0, 1], got {paraphrase_rate}")
        self._seed = seed
        self._paraphrase_rate = paraphrase_rate
        self._alias_variants = max(1, alias_variants)

    def _rng(self, user: str, nonce: str) -> random.Random:
        digest = hashlib.sha256(f"{self._seed}|{user}|{nonce}".encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "little"))

    def _surface(self, label: str, rng: random.Random) -> str:
        if self._paraphrase_rate and rng.random() < self._paraphrase_rate:
            return paraphrase_alias(label, rng.randrange(self._alias_variants))
        return label

    @staticmethod
    def _pick_templates(pool: tuple[str, ...], n: int, rng: random.Random) -> list[str]:
        # Without replacement until the pool is exhausted: the system prompt
        # asks for unrepeated structures, and a capable model obliges.
        picks: list[str] = []
        while len(picks) < n:
            batch = list(pool)
            rng.shuffle(batch)
            picks.extend(batch)
        return picks[:n]

    def complete(self, messages: PromptMessages, decoding: DecodingParams, nonce: str = "") -> str:
        n, labels, none_variant = _parse_user_prompt(messages.user)
        rng = self._rng(messages.user, nonce)
        lines = []
        if none_variant or not labels:
            for template in self._pick_templates(_NONE_TEMPLATES, n, rng):
                a, b = rng.sample(_NONE_FILLERS, 2)
                lines.append(template.format(a=a, b=b))
        elif len(labels) == 1:
            for template in self._pick_templates(_SINGLE_TEMPLATES, n, rng):
                lines.append(template.format(a=self._surface(labels[0], rng)))
        else:
            for template in self._pick_templates(_MULTI_TEMPLATES, n, rng):
                lines.append(
                    template.format(a=self._surface(labels[0], rng), b=self._surface(labels[1], rng))
                )
        return "\n".join(f"- {line}" for line in lines)


def make_client(kind: str, **kwargs) -> LLMClient:
    if kind == "stub":
        allowed = {k: v for k, v in kwargs.items() if k in ("seed", "paraphrase_rate", "alias_variants")}
        return StubLLMClient(**allowed)
    if kind == "http":
        config = HttpClientConfig(
            endpoint=kwargs.get("endpoint", ""),
            model=kwargs.get("model", ""),
            api_key_env=kwargs.get("api_key_env", "SKILLFORGE_API_KEY"),
            timeout=float(kwargs.get("timeout", 60.0)),
            max_retries=int(kwargs.get("max_retries", 3)),
        )
        if not config.endpoint or not config.model:
            raise ValueError("http client needs 'endpoint' and 'model'")
        return HttpChatClient(config)
    raise ValueError(f"unknown client kind {kind!r}")
