"""Sentence-level BLEU, greedy embedding matching, and the round-trip score.

The round-trip (cycle-consistency) score of a source text ``x`` and its
back-translation ``x_hat`` is::

    ccts = lambda1 * mean(BLEU_1..BLEU_4)(x, x_hat) + lambda2 * F1_embed(x, x_hat)

Everything here is pure given the embedding provider. Dot products go
through ``math.fsum`` so scores are bit-for-bit reproducible across machines.
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
import re
import threading
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence, runtime_checkable

import httpx

from .core import LanguageTag
from .errors import ConfigError, TransportError, ValidationError

MAX_ORDER = 4


class TokenizerMode(str, enum.Enum):
    WHITESPACE = "whitespace"
    CHARACTER = "character"


def default_tokenizer_mode(lang: LanguageTag | None) -> TokenizerMode:
    if lang is None or LanguageTag.parse(lang).uses_whitespace:
        return TokenizerMode.WHITESPACE
    # ZH/JA have no word spacing; for KO one token per Hangul syllable block.
    return TokenizerMode.CHARACTER


_WORD_OR_PUNCT = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str, mode: TokenizerMode | str = TokenizerMode.WHITESPACE) -> list[str]:
    mode = TokenizerMode(mode)
    if mode is TokenizerMode.WHITESPACE:
        return _WORD_OR_PUNCT.findall(text)
    return [ch for ch in text if not ch.isspace()]


# ---------------------------------------------------------------- BLEU


@dataclass(frozen=True)
class BleuScore:
    """Per-order BLEU with a shared brevity penalty.

    ``per_n[i]`` is ``brevity_penalty * p`` where ``p`` is the clipped
    precision of order ``i + 1`` after smoothing. ``precisions`` keeps the raw
    clipped precisions (no smoothing, no penalty) for auditing.
    """

    per_n: tuple[float, float, float, float]
    mean: float
    precisions: tuple[float, float, float, float]
    clipped: tuple[int, int, int, int]
    totals: tuple[int, int, int, int]
    brevity_penalty: float
    candidate_length: int
    reference_length: int


@lru_cache(maxsize=65536)
def _ngram_counts(tokens: tuple[str, ...], n: int) -> Counter:
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


def brevity_penalty(candidate_length: int, reference_length: int) -> float:
    if candidate_length >= reference_length:
        return 1.0
    return math.exp(1.0 - reference_length / candidate_length)


def bleu_tokens(candidate: Sequence[str], reference: Sequence[str]) -> BleuScore:
    cand = tuple(candidate)
    ref = tuple(reference)
    if not cand:
        raise ValidationError("candidate is empty after tokenization", "candidate")
    if not ref:
        raise ValidationError("reference is empty after tokenization", "reference")

    clipped: list[int] = []
    totals: list[int] = []
    for n in range(1, MAX_ORDER + 1):
        cand_counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        clipped.append(sum(min(c, ref_counts[g]) for g, c in cand_counts.items()))
        totals.append(max(len(cand) - n + 1, 0))

    bp = brevity_penalty(len(cand), len(ref))
    precisions = tuple(m / t if t else 0.0 for m, t in zip(clipped, totals))
    smoothed = []
    for n, (m, t) in enumerate(zip(clipped, totals), start=1):
        if m > 0:
            smoothed.append(m / t)
        elif n >= 2 and clipped[0] > 0:
            # add-one on the zero count; no unigram overlap means no smoothing
            smoothed.append(1.0 / (t + 1))
        else:
            smoothed.append(0.0)
    per_n = tuple(bp * p for p in smoothed)
    return BleuScore(
        per_n=per_n,  # type: ignore[arg-type]
        mean=sum(per_n) / MAX_ORDER,
        precisions=precisions,  # type: ignore[arg-type]
        clipped=tuple(clipped),  # type: ignore[arg-type]
        totals=tuple(totals),  # type: ignore[arg-type]
        brevity_penalty=bp,
        candidate_length=len(cand),
        reference_length=len(ref),
    )


def bleu(candidate: str, reference: str, mode: TokenizerMode | str = TokenizerMode.WHITESPACE) -> BleuScore:
    return bleu_tokens(tokenize(candidate, mode), tokenize(reference, mode))


# ---------------------------------------------------------------- embeddings


@runtime_checkable
class EmbeddingProvider(Protocol):
    def embed(self, tokens: Sequence[str]) -> list[list[float]]:
        """One unit-norm vector per token, all of the same dimension."""
        ...


def _normalize(vec: Sequence[float]) -> list[float]:
    norm = math.sqrt(math.fsum(x * x for x in vec))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValidationError("embedding has zero or non-finite norm", "embedding")
    return [x / norm for x in vec]


class DeterministicEmbeddingProvider:
    """Offline provider: each token maps to a fixed pseudo-random unit vector.

    Components come from SHA-256 of ``(seed, token, block)`` so the same token
    always gets the same vector on every platform. Distinct tokens are close
    to orthogonal in expectation, identical tokens have cosine 1.
    """

    name = "test-deterministic"

    def __init__(self, dim: int = 128, seed: int = 0):
        if dim <= 0:
            raise ValidationError("dimension must be positive", "dim")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, list[float]] = {}
        self._lock = threading.Lock()

    def _vector(self, token: str) -> list[float]:
        vec = self._cache.get(token)
        if vec is not None:
            return vec
        raw: list[float] = []
        block = 0
        while len(raw) < self.dim:
            digest = hashlib.sha256(f"{self.seed}\x00{token}\x00{block}".encode("utf-8")).digest()
            for i in range(0, 32, 8):
                word = int.from_bytes(digest[i : i + 8], "big")
                raw.append(word / 2.0**63 - 1.0)
            block += 1
        vec = _normalize(raw[: self.dim])
        with self._lock:
            self._cache[token] = vec
        return vec

    def embed(self, tokens: Sequence[str]) -> list[list[float]]:
        return [self._vector(t) for t in tokens]


class HttpEmbeddingProvider:
    """Calls an OpenAI-style ``POST {base_url}/embeddings`` endpoint and normalizes the result."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "MIFC_API_KEY",
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        key = os.environ.get(api_key_env)
        if not key:
            raise ConfigError(f"environment variable {api_key_env} is not set")
        self.model = model
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            timeout=timeout,
            transport=transport,
        )
        self._cache: dict[str, list[float]] = {}
        self._lock = threading.Lock()

    def embed(self, tokens: Sequence[str]) -> list[list[float]]:
        missing = sorted({t for t in tokens if t not in self._cache})
        if missing:
            try:
                resp = self._client.post("/embeddings", json={"model": self.model, "input": missing})
            except httpx.HTTPError as exc:
                raise TransportError(f"embedding request failed: {exc}") from exc
            if resp.status_code != 200:
                raise TransportError(f"embedding endpoint returned {resp.status_code}", status=resp.status_code)
            try:
                data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
                vectors = [_normalize(d["embedding"]) for d in data]
            except (KeyError, TypeError, ValueError) as exc:
                raise TransportError(f"unexpected embedding response: {exc}") from exc
            if len(vectors) != len(missing):
                raise TransportError(f"asked for {len(missing)} embeddings, got {len(vectors)}")
            with self._lock:
                self._cache.update(zip(missing, vectors))
        return [self._cache[t] for t in tokens]

    def close(self) -> None:
        self._client.close()


def _checked_embed(provider: EmbeddingProvider, tokens: Sequence[str]) -> list[list[float]]:
    vectors = provider.embed(tokens)
    if len(vectors) != len(tokens):
        raise ValidationError(f"provider returned {len(vectors)} vectors for {len(tokens)} tokens", "embedding")
    dims = {len(v) for v in vectors}
    if len(dims) > 1 or 0 in dims:
        raise ValidationError(f"inconsistent embedding dimensions {sorted(dims)}", "embedding")
    return vectors


def embed_similarity_tokens(
    candidate: Sequence[str], reference: Sequence[str], provider: EmbeddingProvider
) -> tuple[float, float, float]:
    if not candidate:
        raise ValidationError("candidate is empty after tokenization", "candidate")
    if not reference:
        raise ValidationError("reference is empty after tokenization", "reference")
    # Embed each distinct token once; repeated tokens share rows of the matrix.
    vocab = list(dict.fromkeys([*candidate, *reference]))
    table = dict(zip(vocab, _checked_embed(provider, vocab)))
    cand_u = list(dict.fromkeys(candidate))
    ref_u = list(dict.fromkeys(reference))
    sims = {(a, b): math.fsum(x * y for x, y in zip(table[a], table[b])) for a in cand_u for b in ref_u}
    best_c = {a: max(sims[a, b] for b in ref_u) for a in cand_u}
    best_r = {b: max(sims[a, b] for a in cand_u) for b in ref_u}
    precision = math.fsum(best_c[a] for a in candidate) / len(candidate)
    recall = math.fsum(best_r[b] for b in reference) / len(reference)
    total = precision + recall
    if total <= 0.0:
        return precision, recall, 0.0
    f1 = 2.0 * precision * recall / total
    return precision, recall, min(1.0, max(-1.0, f1))


def embed_similarity(
    candidate: str,
    reference: str,
    provider: EmbeddingProvider,
    mode: TokenizerMode | str = TokenizerMode.WHITESPACE,
) -> float:
    """Greedy-matching F1 of token embeddings (no IDF weighting, no rescaling)."""
    return embed_similarity_tokens(tokenize(candidate, mode), tokenize(reference, mode), provider)[2]


# ---------------------------------------------------------------- round-trip score


@dataclass(frozen=True)
class CctsConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    accept_threshold: float = 0.8
    tokenizer_mode: TokenizerMode | None = None

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "accept_threshold"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise ValidationError(f"must be a finite non-negative number, got {value!r}", f"ccts.{name}")
            object.__setattr__(self, name, float(value))
        if self.lambda1 + self.lambda2 <= 0:
            raise ValidationError("lambda1 + lambda2 must be positive", "ccts.lambda1")
        if self.tokenizer_mode is not None:
            try:
                object.__setattr__(self, "tokenizer_mode", TokenizerMode(self.tokenizer_mode))
            except ValueError:
                raise ValidationError(f"unknown tokenizer mode {self.tokenizer_mode!r}", "ccts.tokenizer_mode") from None

    def mode_for(self, lang: LanguageTag | None) -> TokenizerMode:
        return self.tokenizer_mode or default_tokenizer_mode(lang)

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "accept_threshold": self.accept_threshold,
            "tokenizer_mode": self.tokenizer_mode.value if self.tokenizer_mode else None,
        }


@dataclass(frozen=True)
class CctsResult:
    bleu: BleuScore
    embed: float
    score: float
    mode: TokenizerMode

    @property
    def bleu_mean(self) -> float:
        return self.bleu.mean

    def accepted(self, threshold: float) -> bool:
        return self.score > threshold


def combine(bleu_mean: float, embed_score: float, cfg: CctsConfig) -> float:
    return cfg.lambda1 * bleu_mean + cfg.lambda2 * embed_score


def score_round_trip(
    x: str,
    x_hat: str,
    cfg: CctsConfig,
    provider: EmbeddingProvider,
    *,
    lang: LanguageTag | None = None,
) -> CctsResult:
    """Score a source text against its back-translation, keeping both components."""
    mode = cfg.mode_for(lang)
    source_tokens = tokenize(x, mode)
    back_tokens = tokenize(x_hat, mode)
    b = bleu_tokens(back_tokens, source_tokens)
    e = embed_similarity_tokens(back_tokens, source_tokens, provider)[2]
    return CctsResult(bleu=b, embed=e, score=combine(b.mean, e, cfg), mode=mode)


def ccts(
    x: str,
    x_hat: str,
    cfg: CctsConfig,
    provider: EmbeddingProvider,
    *,
    lang: LanguageTag | None = None,
) -> float:
    return score_round_trip(x, x_hat, cfg, provider, lang=lang).score
