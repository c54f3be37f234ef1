"""Sentence/skill bi-encoder: token embeddings, BiLSTM, attention, projection.

One tower encodes both sides. A text becomes token embeddings, a
bidirectional LSTM contextualizes them, an additive-attention pool collapses
the sequence to one vector, and a linear projection followed by L2
normalization yields the final embedding, so cosine similarity is a plain
dot product. Mean and first-token pooling exist as ablation variants.
"""

from __future__ import annotations

import re
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .checkpoint import load_checkpoint, serialize_checkpoint, sha256_bytes

POOLING_MODES = ("attention", "mean", "first_token")
TOKEN_MODES = ("char", "word")
PAD_ID = 0
UNK_ID = 1
# Large negative instead of -inf: padded positions get exactly zero attention
# after softmax without risking NaN.
ATTENTION_MASK_VALUE = -1e9
_NORM_EPS = 1e-12
_WORD_RE = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


class EncodingError(ValueError):
    """Text cannot be turned into at least one token."""


class DegenerateEmbeddingError(RuntimeError):
    """The pre-normalization vector collapsed to (near) zero length."""


def tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return [c for c in text if not c.isspace()]
    if mode == "word":
        return _WORD_RE.findall(text)
    raise ValueError(f"unknown token mode {mode!r}")


class Vocabulary:
    """Token table with reserved padding (0) and unknown (1) ids."""

    def __init__(self, tokens: Sequence[str], mode: str):
        if mode not in TOKEN_MODES:
            raise ValueError(f"unknown token mode {mode!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.mode = mode
        self.tokens = tuple(tokens)
        self._ids = {t: i + 2 for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + 2

    @classmethod
    def build(cls, texts: Sequence[str], mode: str = "char", max_size: int | None = None) -> "Vocabulary":
        """Frequency-sorted vocabulary; ties break alphabetically."""
        counts: Counter = Counter()
        for text in texts:
            counts.update(tokenize(text, mode))
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[:max_size]
        return cls(ordered, mode)

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokenize(text, self.mode)]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(data["tokens"], data["mode"])


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 64
    lstm_hidden: int = 256
    attention_dim: int = 256
    embed_dim: int = 128
    pooling: str = "attention"
    use_bilstm: bool = True
    token_mode: str = "char"
    max_len: int = 128
    freeze_backbone: bool = False
    seed: int = 42

    def __post_init__(self) -> None:
        for name in ("hidden_size", "lstm_hidden", "attention_dim", "embed_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.token_mode not in TOKEN_MODES:
            raise ValueError(f"token_mode must be one of {TOKEN_MODES}, got {self.token_mode!r}")


@dataclass
class TokenMatrix:
    """Per-token embeddings for one text, before sequence modeling."""

    values: np.ndarray  # (L, hidden) float32
    mask: np.ndarray  # (L,) bool
    truncated: bool = False


class EmbeddingTokenEncoder(nn.Module):
    """Trainable lookup-table backbone; the padding row stays zero."""

    def __init__(self, vocab_size: int, hidden_size: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, hidden_size, padding_idx=PAD_ID)
        self.output_dim = hidden_size

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embedding(ids)


class BiEncoder(nn.Module):
    """Shared-parameter tower mapping text to a unit-norm embedding."""

    def __init__(self, config: EncoderConfig, vocab: Vocabulary):
        super().__init__()
        if vocab.mode != config.token_mode:
            raise ValueError(
                f"vocabulary mode {vocab.mode!r} does not match config token_mode {config.token_mode!r}"
            )
        torch.manual_seed(config.seed)  # reproducible initialization
        self.config = config
        self.vocab = vocab
        self.token_encoder = EmbeddingTokenEncoder(len(vocab), config.hidden_size)
        if config.use_bilstm:
            self.lstm: nn.LSTM | None = nn.LSTM(
                config.hidden_size, config.lstm_hidden, batch_first=True, bidirectional=True
            )
            feature_dim = 2 * config.lstm_hidden
        else:
            self.lstm = None
            feature_dim = config.hidden_size
        self.attention_W = nn.Linear(feature_dim, config.attention_dim, bias=False)
        self.attention_w = nn.Linear(config.attention_dim, 1, bias=False)
        self.projection = nn.Linear(feature_dim, config.embed_dim)
        if config.freeze_backbone:
            for param in self.token_encoder.parameters():
                param.requires_grad_(False)

    # -- batching ------------------------------------------------------------

    def _encode_ids(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor, list[bool]]:
        if not texts:
            raise EncodingError("empty batch")
        encoded = []
        truncated = []
        for text in texts:
            ids = self.vocab.encode(text)
            if not ids:
                raise EncodingError(f"text tokenizes to zero tokens: {text[:50]!r}")
            truncated.append(len(ids) > self.config.max_len)
            encoded.append(ids[: self.config.max_len])
        width = max(len(ids) for ids in encoded)
        device = self.projection.weight.device
        id_tensor = torch.full((len(encoded), width), PAD_ID, dtype=torch.long, device=device)
        mask = torch.zeros(len(encoded), width, dtype=torch.bool, device=device)
        for row, ids in enumerate(encoded):
            id_tensor[row, : len(ids)] = torch.tensor(ids, dtype=torch.long, device=device)
            mask[row, : len(ids)] = True
        return id_tensor, mask, truncated

    def _sequence_features(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        hidden = self.token_encoder(ids)
        if self.lstm is None:
            return hidden
        lengths = mask.sum(dim=1).cpu()
        packed = pack_padded_sequence(hidden, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        features, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return features

    def _attention(self, features: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        scores = self.attention_w(torch.tanh(self.attention_W(features))).squeeze(-1)
        scores = scores.masked_fill(~mask, ATTENTION_MASK_VALUE)
        alpha = torch.softmax(scores, dim=-1)
        pooled = torch.bmm(alpha.unsqueeze(1), features).squeeze(1)
        return pooled, alpha

    def _pool(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.config.pooling == "attention":
            pooled, _ = self._attention(features, mask)
            return pooled
        if self.config.pooling == "mean":
            weights = mask.to(features.dtype)
            return (features * weights.unsqueeze(-1)).sum(dim=1) / weights.sum(dim=1, keepdim=True)
        return features[:, 0, :]  # first_token; position 0 is always real

    def _normalize(self, projected: torch.Tensor) -> torch.Tensor:
        norms = projected.norm(dim=-1, keepdim=True)
        if bool((norms <= _NORM_EPS).any()):
            raise DegenerateEmbeddingError("projection produced a zero-length vector")
        return projected / norms

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        """Differentiable batch encoding; rows are unit-norm."""
        ids, mask, _ = self._encode_ids(texts)
        features = self._sequence_features(ids, mask)
        return self._normalize(self.projection(self._pool(features, mask)))

    # -- single-text operations (inference/verification views) ----------------

    @torch.no_grad()
    def encode_tokens(self, text: str) -> TokenMatrix:
        ids, mask, truncated = self._encode_ids([text])
        values = self.token_encoder(ids)[0].cpu().numpy().astype(np.float32)
        return TokenMatrix(values=values, mask=mask[0].cpu().numpy(), truncated=truncated[0])

    @torch.no_grad()
    def bilstm(self, tokens: TokenMatrix) -> np.ndarray:
        """Contextualize one text's token matrix; rows match input rows."""
        if self.lstm is None:
            raise RuntimeError("this model was configured without the recurrent layer")
        hidden = torch.from_numpy(np.asarray(tokens.values, dtype=np.float32)).unsqueeze(0)
        hidden = hidden.to(self.projection.weight.dtype)
        out, _ = self.lstm(hidden)
        return out[0].cpu().numpy().astype(np.float32)

    @torch.no_grad()
    def attention_pool(self, features: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Pool (L, F) features; returns (vector, attention weights summing to 1)."""
        feats = torch.from_numpy(np.asarray(features, dtype=np.float32)).unsqueeze(0)
        feats = feats.to(self.projection.weight.dtype)
        if mask is None:
            mask_tensor = torch.ones(1, feats.shape[1], dtype=torch.bool)
        else:
            mask_tensor = torch.from_numpy(np.asarray(mask, dtype=bool)).unsqueeze(0)
        if not bool(mask_tensor.any()):
            raise EncodingError("cannot pool a fully masked sequence")
        pooled, alpha = self._attention(feats, mask_tensor)
        return (
            pooled[0].cpu().numpy().astype(np.float32),
            alpha[0].cpu().numpy().astype(np.float32),
        )

    @torch.no_grad()
    def project(self, pooled: np.ndarray) -> np.ndarray:
        """Project and L2-normalize one pooled vector."""
        vec = torch.from_numpy(np.asarray(pooled, dtype=np.float32)).unsqueeze(0)
        vec = vec.to(self.projection.weight.dtype)
        return self._normalize(self.projection(vec))[0].cpu().numpy().astype(np.float32)

    @torch.no_grad()
    def embed(self, text: str) -> np.ndarray:
        """Unit-norm float32 embedding of one text."""
        was_training = self.training
        self.eval()
        try:
            return self.forward([text])[0].cpu().numpy().astype(np.float32)
        finally:
            self.train(was_training)

    @torch.no_grad()
    def embed_batch(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.config.embed_dim), dtype=np.float32)
        was_training = self.training
        self.eval()
        try:
            chunks = [
                self.forward(texts[start : start + batch_size]).cpu().numpy().astype(np.float32)
                for start in range(0, len(texts), batch_size)
            ]
        finally:
            self.train(was_training)
        return np.concatenate(chunks, axis=0)

    # -- persistence -----------------------------------------------------------

    def _config_dict(self) -> dict:
        return {
            "hidden_size": self.config.hidden_size,
            "lstm_hidden": self.config.lstm_hidden,
            "attention_dim": self.config.attention_dim,
            "embed_dim": self.config.embed_dim,
            "pooling": self.config.pooling,
            "use_bilstm": self.config.use_bilstm,
            "token_mode": self.config.token_mode,
            "max_len": self.config.max_len,
            "freeze_backbone": self.config.freeze_backbone,
            "seed": self.config.seed,
            "vocab": self.vocab.to_dict(),
        }

    def checkpoint_bytes(self) -> bytes:
        tensors = {
            name: param.detach().cpu().numpy().astype(np.float32)
            for name, param in self.state_dict().items()
        }
        return serialize_checkpoint("biencoder", self._config_dict(), tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.checkpoint_bytes())

    def fingerprint(self) -> str:
        """Content hash of the serialized model; identical models collide."""
        return sha256_bytes(self.checkpoint_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "BiEncoder":
        kind, config, tensors = load_checkpoint(path)
        if kind != "biencoder":
            raise ValueError(f"{path}: not a bi-encoder checkpoint (kind={kind!r})")
        vocab = Vocabulary.from_dict(config.pop("vocab"))
        model = cls(EncoderConfig(**config), vocab)
        state = {name: torch.from_numpy(np.array(data)) for name, data in tensors.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def make_model(
    config: EncoderConfig, texts: Sequence[str], max_vocab: int | None = None
) -> BiEncoder:
    """Build a vocabulary from ``texts`` and a fresh model over it."""
    vocab = Vocabulary.build(texts, mode=config.token_mode, max_size=max_vocab)
    if not vocab.tokens:
        raise EncodingError("no tokens found in the vocabulary corpus")
    return BiEncoder(config, vocab)


def small_config(**overrides) -> EncoderConfig:
    """Test-scale defaults; production-scale dimensions come from the config file."""
    base = EncoderConfig(hidden_size=32, lstm_hidden=48, attention_dim=32, embed_dim=64, max_len=96)
    return replace(base, **overrides)
