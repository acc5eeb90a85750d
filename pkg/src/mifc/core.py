"""Record types and the JSONL schema every stage reads and writes.

One sample per line::

    {"id": "en-0001", "lang": "EN", "kind": "multiple_choice_qa",
     "question": "...", "options": [{"label": "A", "text": "..."}, ...],
     "rationale": "...", "answer": "B", "source": "medqa",
     "annotations": {"filter.R": 0.12, "gen.judge.accepted": true}}

Absent optional fields are omitted rather than written as ``null``. Unknown
top-level keys survive a parse/serialize round trip untouched.
"""

from __future__ import annotations

import contextlib
import enum
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import IO, Any, Iterable, Iterator, Mapping

from .errors import FormatError, ValidationError

Scalar = str | int | float | bool | None


class LanguageTag(str, enum.Enum):
    EN = "EN"
    ZH = "ZH"
    JA = "JA"
    KO = "KO"
    FR = "FR"
    ES = "ES"

    @classmethod
    def parse(cls, code: str) -> "LanguageTag":
        if isinstance(code, cls):
            return code
        if not isinstance(code, str):
            raise ValidationError(f"language code must be a string, got {code!r}", "lang")
        try:
            return cls(code.strip().upper())
        except ValueError:
            allowed = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown language {code!r} (expected one of {allowed})", "lang") from None

    @property
    def display_name(self) -> str:
        return _LANGUAGE_NAMES[self]

    @property
    def uses_whitespace(self) -> bool:
        """True for scripts where whitespace separates words."""
        return self in (LanguageTag.EN, LanguageTag.FR, LanguageTag.ES)

    def __str__(self) -> str:
        return self.value


_LANGUAGE_NAMES = {
    LanguageTag.EN: "English",
    LanguageTag.ZH: "Chinese",
    LanguageTag.JA: "Japanese",
    LanguageTag.KO: "Korean",
    LanguageTag.FR: "French",
    LanguageTag.ES: "Spanish",
}


class SampleKind(str, enum.Enum):
    RAW_TEXT = "raw_text"
    SHORT_ANSWER_QA = "short_answer_qa"
    MULTIPLE_CHOICE_QA = "multiple_choice_qa"

    def __str__(self) -> str:
        return self.value


_KNOWN_KEYS = (
    "id",
    "lang",
    "kind",
    "question",
    "options",
    "rationale",
    "answer",
    "raw_text",
    "source",
    "annotations",
)


def _check_scalar(key: str, value: Any) -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValidationError(f"non-finite value {value!r}", f"annotations.{key}")
        return
    raise ValidationError(f"annotation values must be scalars, got {type(value).__name__}", f"annotations.{key}")


@dataclass(frozen=True)
class DataSample:
    """One corpus record. Construct through the normal initializer; it validates."""

    id: str
    lang: LanguageTag
    kind: SampleKind
    source: str
    question: str | None = None
    options: tuple[tuple[str, str], ...] | None = None
    rationale: str | None = None
    answer: str | None = None
    raw_text: str | None = None
    annotations: Mapping[str, Scalar] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True)

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id.strip():
            raise ValidationError("must be a non-empty string", "id")
        object.__setattr__(self, "lang", LanguageTag.parse(self.lang))
        try:
            object.__setattr__(self, "kind", SampleKind(self.kind))
        except ValueError:
            raise ValidationError(f"unknown kind {self.kind!r}", "kind") from None
        if not isinstance(self.source, str):
            raise ValidationError("must be a string", "source")
        for name in ("question", "rationale", "answer", "raw_text"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                raise ValidationError("must be a string", name)
        if self.options is not None:
            object.__setattr__(self, "options", tuple((str(lbl), str(txt)) for lbl, txt in self.options))
        for key, value in self.annotations.items():
            if not isinstance(key, str) or not key:
                raise ValidationError("annotation keys must be non-empty strings", "annotations")
            _check_scalar(key, value)
        object.__setattr__(self, "annotations", MappingProxyType(dict(self.annotations)))
        clashes = sorted(set(self.extra) & set(_KNOWN_KEYS))
        if clashes:
            raise ValidationError(f"extra fields shadow schema fields {clashes}", "extra")
        object.__setattr__(self, "extra", MappingProxyType(dict(self.extra)))
        self._check_kind()

    def _check_kind(self) -> None:
        def present(name: str) -> bool:
            value = getattr(self, name)
            return value is not None and value.strip() != ""

        if self.kind is SampleKind.RAW_TEXT:
            if not present("raw_text"):
                raise ValidationError("required for kind=raw_text", "raw_text")
            if self.question is not None:
                raise ValidationError("must be absent for kind=raw_text", "question")
            if self.options is not None:
                raise ValidationError("must be absent for kind=raw_text", "options")
            return

        if not present("question"):
            raise ValidationError(f"required for kind={self.kind.value}", "question")
        if not present("answer"):
            raise ValidationError(f"required for kind={self.kind.value}", "answer")
        if self.kind is SampleKind.SHORT_ANSWER_QA:
            if self.options is not None:
                raise ValidationError("must be absent for kind=short_answer_qa", "options")
            return

        if self.options is None or len(self.options) < 2:
            raise ValidationError("multiple_choice_qa needs at least 2 options", "options")
        labels = [label for label, _ in self.options]
        if any(not label.strip() for label in labels):
            raise ValidationError("option labels must be non-empty", "options")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate option labels {labels}", "options")
        if self.answer not in labels:
            raise ValidationError(f"{self.answer!r} is not one of the option labels {labels}", "answer")

    @property
    def text(self) -> str:
        """The text content stages score: raw text, or question and answer joined by a space."""
        if self.kind is SampleKind.RAW_TEXT:
            return self.raw_text or ""
        return f"{self.question} {self.answer}"

    def annotate(self, updates: Mapping[str, Scalar]) -> "DataSample":
        """Return a copy with ``updates`` merged in. Existing keys are never dropped."""
        merged = dict(self.annotations)
        merged.update(updates)
        return replace(self, annotations=merged)

    def evolve(self, **changes: Any) -> "DataSample":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "lang": self.lang.value, "kind": self.kind.value}
        if self.question is not None:
            out["question"] = self.question
        if self.options is not None:
            out["options"] = [{"label": label, "text": text} for label, text in self.options]
        if self.rationale is not None:
            out["rationale"] = self.rationale
        if self.answer is not None:
            out["answer"] = self.answer
        if self.raw_text is not None:
            out["raw_text"] = self.raw_text
        out["source"] = self.source
        out["annotations"] = dict(self.annotations)
        for key, value in self.extra.items():
            out[key] = value
        return out

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "DataSample":
        if not isinstance(obj, Mapping):
            raise ValidationError(f"record must be a JSON object, got {type(obj).__name__}")
        for required in ("id", "lang", "kind", "source"):
            if required not in obj:
                raise ValidationError("missing required field", required)
        annotations = obj.get("annotations", {})
        if annotations is None:
            annotations = {}
        if not isinstance(annotations, Mapping):
            raise ValidationError("must be an object", "annotations")
        return cls(
            id=obj["id"],
            lang=obj["lang"],
            kind=obj["kind"],
            source=obj["source"],
            question=obj.get("question"),
            options=_options_from_json(obj.get("options")),
            rationale=obj.get("rationale"),
            answer=obj.get("answer"),
            raw_text=obj.get("raw_text"),
            annotations=annotations,
            extra={k: v for k, v in obj.items() if k not in _KNOWN_KEYS},
        )


def _options_from_json(raw: Any) -> tuple[tuple[str, str], ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise ValidationError("must be a list", "options")
    options = []
    for i, item in enumerate(raw):
        if isinstance(item, Mapping) and "label" in item and "text" in item:
            label, text = item["label"], item["text"]
        elif isinstance(item, (list, tuple)) and len(item) == 2:
            label, text = item
        else:
            raise ValidationError(f"entry {i} must be {{label, text}}", "options")
        if not isinstance(label, str) or not isinstance(text, str):
            raise ValidationError(f"entry {i} label and text must be strings", "options")
        options.append((label, text))
    return tuple(options)


# U+2028/U+2029/U+0085 are line breaks for str.splitlines(); escape them so a
# record stays on one physical line for every reader.
_LINE_BREAK_ESCAPES = str.maketrans({"\u2028": "\\u2028", "\u2029": "\\u2029", "\u0085": "\\u0085"})


def dumps_line(obj: Any) -> str:
    text = json.dumps(obj, ensure_ascii=False, allow_nan=False, separators=(",", ":"))
    return text.translate(_LINE_BREAK_ESCAPES)


def parse_sample(line: str | bytes, *, line_no: int | None = None, path: str | None = None) -> DataSample:
    """Parse one JSONL line into a validated :class:`DataSample`."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8: {exc}", line_no, path) from None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON: {exc.msg} (column {exc.colno})", line_no, path) from None
    try:
        return DataSample.from_dict(obj)
    except ValidationError as exc:
        if line_no is None and path is None:
            raise
        where = f"{path}:{line_no}" if path else f"line {line_no}"
        raise ValidationError(f"{where}: {exc}", exc.field) from None


def serialize_sample(sample: DataSample) -> str:
    """Single-line JSON for ``sample``, without the trailing newline."""
    return dumps_line(sample.to_dict())


def iter_jsonl(path: str | os.PathLike[str]) -> Iterator[DataSample]:
    """Stream samples from ``path``; duplicate ids are a validation error."""
    seen: set[str] = set()
    path_str = str(path)
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            sample = parse_sample(raw, line_no=line_no, path=path_str)
            if sample.id in seen:
                raise ValidationError(f"{path_str}:{line_no}: duplicate id {sample.id!r}", "id")
            seen.add(sample.id)
            yield sample


def read_jsonl(path: str | os.PathLike[str]) -> list[DataSample]:
    return list(iter_jsonl(path))


@contextlib.contextmanager
def atomic_open(path: str | os.PathLike[str], mode: str = "w") -> Iterator[IO[Any]]:
    """Open a temp file next to ``path`` and rename it into place on success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        if "b" in mode:
            fh = os.fdopen(fd, mode)
        else:
            fh = os.fdopen(fd, mode, encoding="utf-8", newline="\n")
        with fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | os.PathLike[str], samples: Iterable[DataSample]) -> int:
    count = 0
    with atomic_open(path) as fh:
        for sample in samples:
            fh.write(serialize_sample(sample))
            fh.write("\n")
            count += 1
    return count


def write_json(path: str | os.PathLike[str], obj: Any) -> None:
    with atomic_open(path) as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike[str]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
