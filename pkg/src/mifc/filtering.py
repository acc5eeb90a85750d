"""Knowledge-density filtering against a curated medical keyword list.

For a text ``T`` and keyword list ``K``::

    R = sum(len(k) * cnt(k, T) for k in K) / len(T)

A sample is kept when ``R > thres1`` and the number of distinct keywords
found exceeds ``thres2``. Lengths are counted in Unicode code points so the
ratio means the same thing for Latin and CJK text.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import DataSample, LanguageTag
from .errors import ConfigError, ValidationError

logger = logging.getLogger(__name__)


class MatchMode(str, enum.Enum):
    WORD_BOUNDARY = "word_boundary"
    SUBSTRING = "substring"


def default_match_mode(lang: LanguageTag | None) -> MatchMode:
    """Word matching for whitespace-delimited scripts, substring matching for CJK."""
    if lang is None or LanguageTag.parse(lang).uses_whitespace:
        return MatchMode.WORD_BOUNDARY
    return MatchMode.SUBSTRING


@dataclass(frozen=True)
class FilterConfig:
    keywords: tuple[str, ...]
    thres1: float = 0.05
    thres2: int = 2
    # None picks the mode from each sample's language.
    match_mode: MatchMode | None = None

    def __post_init__(self) -> None:
        if isinstance(self.keywords, str):
            raise ValidationError("must be a list of strings, not one string", "filter.keywords")
        cleaned: list[str] = []
        seen: set[str] = set()
        for kw in self.keywords:
            if not isinstance(kw, str) or not kw.strip():
                raise ValidationError("keywords must be non-empty after trimming", "filter.keywords")
            kw = kw.strip()
            # Matching is case-insensitive, so case variants would double count.
            if kw.lower() in seen:
                continue
            seen.add(kw.lower())
            cleaned.append(kw)
        if not cleaned:
            raise ValidationError("keyword list is empty", "filter.keywords")
        object.__setattr__(self, "keywords", tuple(cleaned))
        if isinstance(self.thres1, bool) or not 0.0 <= float(self.thres1) <= 1.0:
            raise ValidationError(f"must lie in [0, 1], got {self.thres1!r}", "filter.thres1")
        object.__setattr__(self, "thres1", float(self.thres1))
        if isinstance(self.thres2, bool) or int(self.thres2) != self.thres2 or self.thres2 < 0:
            raise ValidationError(f"must be a non-negative integer, got {self.thres2!r}", "filter.thres2")
        object.__setattr__(self, "thres2", int(self.thres2))
        if self.match_mode is not None:
            try:
                object.__setattr__(self, "match_mode", MatchMode(self.match_mode))
            except ValueError:
                raise ValidationError(f"unknown match mode {self.match_mode!r}", "filter.match_mode") from None
        patterns = {mode: tuple(_compile(kw, mode) for kw in cleaned) for mode in MatchMode}
        object.__setattr__(self, "_patterns", patterns)

    def patterns(self, mode: MatchMode) -> tuple[re.Pattern[str], ...]:
        return self._patterns[mode]  # type: ignore[attr-defined]

    def to_dict(self) -> dict:
        return {
            "keywords": list(self.keywords),
            "thres1": self.thres1,
            "thres2": self.thres2,
            "match_mode": self.match_mode.value if self.match_mode else None,
        }


def _compile(keyword: str, mode: MatchMode) -> re.Pattern[str]:
    body = re.escape(keyword)
    if mode is MatchMode.WORD_BOUNDARY:
        body = rf"(?<!\w){body}(?!\w)"
    return re.compile(body, re.IGNORECASE)


def load_keywords(path: str | Path) -> list[str]:
    """One keyword per line, UTF-8; blank lines and ``#`` comments are skipped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read keyword file {path}: {exc}") from exc
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


@dataclass(frozen=True)
class FilterReport:
    ratio: float
    unique_keywords: int
    matched: tuple[tuple[str, int], ...]
    text_length: int
    kept: bool
    mode: MatchMode = field(default=MatchMode.WORD_BOUNDARY, compare=False)

    @property
    def covered_length(self) -> int:
        return sum(len(kw) * cnt for kw, cnt in self.matched)


def count_occurrences(pattern: re.Pattern[str], text: str) -> int:
    # finditer scans left to right and resumes after each match: non-overlapping.
    return sum(1 for _ in pattern.finditer(text))


def score_sample(
    text: str,
    cfg: FilterConfig,
    *,
    lang: LanguageTag | None = None,
) -> FilterReport:
    """Compute the keyword density ratio and distinct-keyword count for ``text``."""
    if not isinstance(text, str) or len(text) == 0:
        raise ValidationError("text is empty; density is undefined", "text")
    mode = cfg.match_mode or default_match_mode(lang)
    matched = []
    for kw, pattern in zip(cfg.keywords, cfg.patterns(mode)):
        cnt = count_occurrences(pattern, text)
        if cnt:
            matched.append((kw, cnt))
    covered = sum(len(kw) * cnt for kw, cnt in matched)
    ratio = covered / len(text)
    unique = len(matched)
    return FilterReport(
        ratio=ratio,
        unique_keywords=unique,
        matched=tuple(matched),
        text_length=len(text),
        kept=ratio > cfg.thres1 and unique > cfg.thres2,
        mode=mode,
    )


def filter_stream(
    samples: Iterable[DataSample],
    cfg: FilterConfig,
) -> tuple[list[DataSample], list[DataSample]]:
    """Split ``samples`` into (kept, rejected), both in input order.

    Every output sample carries ``filter.R``, ``filter.uni_k`` and
    ``filter.kept``. A sample that cannot be scored goes to ``rejected`` with
    a ``filter.error`` annotation instead of aborting the run.
    """
    kept: list[DataSample] = []
    rejected: list[DataSample] = []
    for sample in samples:
        try:
            report = score_sample(sample.text, cfg, lang=sample.lang)
        except ValidationError as exc:
            logger.warning("filter: sample %s not scored: %s", sample.id, exc)
            rejected.append(sample.annotate({"filter.kept": False, "filter.error": str(exc)}))
            continue
        annotated = sample.annotate(
            {
                "filter.R": report.ratio,
                "filter.uni_k": report.unique_keywords,
                "filter.kept": report.kept,
            }
        )
        (kept if report.kept else rejected).append(annotated)
    return kept, rejected


def summarize(kept: Sequence[DataSample], rejected: Sequence[DataSample]) -> dict:
    errors = sum(1 for s in rejected if "filter.error" in s.annotations)
    total = len(kept) + len(rejected)
    return {
        "input": total,
        "kept": len(kept),
        "rejected": len(rejected),
        "errors": errors,
        "keep_rate": (len(kept) / total) if total else 0.0,
    }
