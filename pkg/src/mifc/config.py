"""Run configuration: one JSON file shared by every command.

Example::

    {
      "filter": {"keywords_file": "keywords.txt", "thres1": 0.05, "thres2": 2},
      "ccts": {"lambda1": 0.5, "lambda2": 0.5, "accept_threshold": 0.8},
      "provider": {"base_url": "https://api.openai.com/v1", "model_name": "gpt-4o-mini"},
      "judge": {"judges": [{"model_name": "gpt-4"}, {"model_name": "claude-3-5-sonnet"}],
                "per_criterion_threshold": 0.7, "aggregation": "mean_across_judges"},
      "embedding": {"kind": "test-deterministic", "dim": 128},
      "concurrency_limit": 4,
      "seed": 0
    }

Relative paths inside the file resolve against the file's directory.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .core import canonical_json, sha256_bytes
from .errors import ConfigError, ValidationError
from .filtering import FilterConfig, load_keywords
from .llm_client import DETERMINISTIC_TEMPERATURE, ProviderConfig
from .metrics import CctsConfig, DeterministicEmbeddingProvider, EmbeddingProvider, HttpEmbeddingProvider


class Aggregation(str, enum.Enum):
    MEAN = "mean_across_judges"
    MIN = "min_across_judges"


def _default_judges() -> tuple[ProviderConfig, ...]:
    return (
        ProviderConfig(model_name="gpt-4", temperature=DETERMINISTIC_TEMPERATURE),
        ProviderConfig(model_name="claude-3-5-sonnet", temperature=DETERMINISTIC_TEMPERATURE),
    )


@dataclass(frozen=True)
class JudgeConfig:
    judges: tuple[ProviderConfig, ...] = field(default_factory=_default_judges)
    per_criterion_threshold: float = 0.7
    aggregation: Aggregation = Aggregation.MEAN

    def __post_init__(self) -> None:
        object.__setattr__(self, "judges", tuple(self.judges))
        if not self.judges:
            raise ValidationError("at least one judge is required", "judge.judges")
        if not 0.0 <= self.per_criterion_threshold <= 1.0:
            raise ValidationError("must lie in [0, 1]", "judge.per_criterion_threshold")
        try:
            object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        except ValueError:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}", "judge.aggregation") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "judges": [j.to_dict() for j in self.judges],
            "per_criterion_threshold": self.per_criterion_threshold,
            "aggregation": self.aggregation.value,
        }


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "test-deterministic"
    dim: int = 128
    seed: int = 0
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "MIFC_API_KEY"

    def __post_init__(self) -> None:
        if self.kind not in ("test-deterministic", "http"):
            raise ValidationError(f"unknown embedding provider {self.kind!r}", "embedding.kind")
        if self.kind == "http" and not (self.base_url and self.model):
            raise ValidationError("http embeddings need base_url and model", "embedding")

    def build(self) -> EmbeddingProvider:
        if self.kind == "http":
            return HttpEmbeddingProvider(self.base_url, self.model, self.api_key_env)  # type: ignore[arg-type]
        return DeterministicEmbeddingProvider(dim=self.dim, seed=self.seed)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PipelineConfig:
    filter: FilterConfig | None = None
    ccts: CctsConfig = field(default_factory=CctsConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    concurrency_limit: int = 4
    seed: int = 0
    # Extra attempts when a generation breaks the requested format.
    format_retries: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.concurrency_limit, bool) or int(self.concurrency_limit) != self.concurrency_limit or self.concurrency_limit < 1:
            raise ValidationError("must be a positive integer", "concurrency_limit")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError("must be an unsigned integer", "seed")
        if self.format_retries < 0:
            raise ValidationError("must be >= 0", "format_retries")

    def require_filter(self) -> FilterConfig:
        if self.filter is None:
            raise ConfigError("no filter section (keywords) configured")
        return self.filter

    def to_dict(self) -> dict[str, Any]:
        return {
            "filter": self.filter.to_dict() if self.filter else None,
            "ccts": self.ccts.to_dict(),
            "judge": self.judge.to_dict(),
            "provider": self.provider.to_dict(),
            "embedding": self.embedding.to_dict(),
            "concurrency_limit": self.concurrency_limit,
            "seed": self.seed,
            "format_retries": self.format_retries,
        }

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode("utf-8"))


def _section(data: Mapping[str, Any], name: str) -> dict[str, Any]:
    value = data.get(name) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(value)


def config_from_dict(data: Mapping[str, Any], base_dir: Path | None = None) -> PipelineConfig:
    base_dir = base_dir or Path.cwd()
    known = {"filter", "ccts", "judge", "provider", "embedding", "concurrency_limit", "seed", "format_retries"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        filter_cfg = None
        if data.get("filter"):
            f = _section(data, "filter")
            keywords = list(f.pop("keywords", []) or [])
            kw_file = f.pop("keywords_file", None)
            if kw_file:
                keywords += load_keywords(base_dir / kw_file)
            filter_cfg = FilterConfig(keywords=tuple(keywords), **f)

        judge_data = _section(data, "judge")
        judge_kwargs: dict[str, Any] = {}
        if "judges" in judge_data:
            judge_kwargs["judges"] = tuple(
                ProviderConfig.from_dict(j, temperature=DETERMINISTIC_TEMPERATURE) for j in judge_data.pop("judges")
            )
        judge_cfg = JudgeConfig(**judge_kwargs, **judge_data)

        return PipelineConfig(
            filter=filter_cfg,
            ccts=CctsConfig(**_section(data, "ccts")),
            judge=judge_cfg,
            provider=ProviderConfig.from_dict(_section(data, "provider")),
            embedding=EmbeddingConfig(**_section(data, "embedding")),
            **{k: data[k] for k in ("concurrency_limit", "seed", "format_retries") if k in data},
        )
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config_from_dict(data, path.parent)
