"""Curation pipeline for multilingual medical instruction-tuning data."""

from __future__ import annotations

__version__ = "0.1.0"

from .core import DataSample, LanguageTag, SampleKind, parse_sample, serialize_sample
from .errors import ConfigError, FormatError, MifcError, ParseError, RenderError, TransportError, ValidationError

__all__ = [
    "ConfigError",
    "DataSample",
    "FormatError",
    "LanguageTag",
    "MifcError",
    "ParseError",
    "RenderError",
    "SampleKind",
    "TransportError",
    "ValidationError",
    "__version__",
    "parse_sample",
    "serialize_sample",
]
