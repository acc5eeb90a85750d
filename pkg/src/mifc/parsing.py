"""Parsers for the structured responses the prompts ask for.

Generation responses look like::

    ###Question: ...
    ###Options: A. ..., B. ..., C. ..., D. ...
    ###Rationale: ...
    ###Answer: B
    [SEP]
    ###Question: ...
    ###Answer: ...

Judge responses are a dict with three scores in [0, 1], often written with
single quotes. Every failure raises :class:`ParseError` or
:class:`ValidationError`; nothing else escapes.
"""

from __future__ import annotations

import ast
import json
import math
import re
from dataclasses import dataclass
from typing import Any

from .errors import ParseError, ValidationError

SEPARATOR = "[SEP]"
CLEANED_MARKER = "###Cleaned Text:"
MC_LABELS = ("A", "B", "C", "D")

_MARKER = re.compile(r"###(Question|Options|Rationale|Answer):")


@dataclass(frozen=True)
class CondensedText:
    text: str
    lenient: bool = False


@dataclass(frozen=True)
class McItem:
    question: str
    options: tuple[tuple[str, str], ...]
    rationale: str
    answer: str

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValidationError("question is empty", "mc.question")
        if tuple(lbl for lbl, _ in self.options) != MC_LABELS:
            raise ValidationError(f"options must be labelled A-D, got {[l for l, _ in self.options]}", "mc.options")
        if self.answer not in MC_LABELS:
            raise ValidationError(f"answer {self.answer!r} is outside A-D", "mc.answer")


@dataclass(frozen=True)
class ShortItem:
    question: str
    answer: str

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValidationError("question is empty", "short.question")
        if not self.answer.strip():
            raise ValidationError("answer is empty", "short.answer")


@dataclass(frozen=True)
class GeneratedPair:
    mc: McItem
    short: ShortItem


def _as_text(response: Any) -> str:
    if isinstance(response, bytes):
        return response.decode("utf-8", errors="replace")
    if not isinstance(response, str):
        raise ParseError(f"expected text, got {type(response).__name__}")
    return response


# ---------------------------------------------------------------- condensed text


def parse_condensed(response: str) -> CondensedText:
    text = _as_text(response)
    if not text.strip():
        raise ParseError("empty response", marker=CLEANED_MARKER, position=0)
    idx = text.find(CLEANED_MARKER)
    if idx < 0:
        return CondensedText(text.strip(), lenient=True)
    body = text[idx + len(CLEANED_MARKER) :].strip()
    if not body:
        raise ParseError("nothing follows the cleaned-text marker", marker=CLEANED_MARKER, position=idx)
    return CondensedText(body, lenient=False)


# ---------------------------------------------------------------- generation blocks


def _fields(segment: str, offset: int) -> dict[str, str]:
    matches = list(_MARKER.finditer(segment))
    fields: dict[str, str] = {}
    for i, m in enumerate(matches):
        name = m.group(1)
        if name in fields:
            raise ParseError(f"duplicate ###{name}: marker", marker=f"###{name}", position=offset + m.start())
        end = matches[i + 1].start() if i + 1 < len(matches) else len(segment)
        fields[name] = segment[m.end() : end].strip()
    if matches:
        # The prompt shows the format inside quotes; drop a quote echoed around the block.
        prefix = segment[: matches[0].start()].strip()
        last = matches[-1].group(1)
        if prefix[-1:] in ("'", '"') and fields[last].endswith(prefix[-1]):
            fields[last] = fields[last][:-1].rstrip()
    return fields


def _require(fields: dict[str, str], name: str, offset: int) -> str:
    if name not in fields:
        raise ParseError(f"missing ###{name}: marker", marker=f"###{name}", position=offset)
    value = fields[name]
    if not value:
        raise ParseError(f"###{name}: is empty", marker=f"###{name}", position=offset)
    return value


_FIRST_LABEL = re.compile(r"\s*\(?A[.)]\s*")


def parse_options(text: str) -> tuple[tuple[str, str], ...]:
    """Split ``A. x, B. y, C. z, D. w`` into labelled options.

    Labels must appear in order and (after the first) follow a comma,
    semicolon or newline, so commas inside option text are kept. Anything
    after the D label belongs to option D; "E. coli" is not a fifth option.
    """
    m = _FIRST_LABEL.match(text)
    if not m:
        raise ParseError("options must start with label A", marker="###Options")
    starts = [(m.start(), m.end())]
    pos = m.end()
    for label in MC_LABELS[1:]:
        pattern = re.compile(rf"\s*[,;\n]\s*\(?{label}[.)]\s*")
        nxt = pattern.search(text, pos)
        if not nxt:
            raise ParseError(f"option {label} not found", marker="###Options", position=pos)
        starts.append((nxt.start(), nxt.end()))
        pos = nxt.end()
    options = []
    for i, label in enumerate(MC_LABELS):
        end = starts[i + 1][0] if i + 1 < len(starts) else len(text)
        option_text = text[starts[i][1] : end].strip()
        if not option_text:
            raise ParseError(f"option {label} is empty", marker="###Options", position=starts[i][1])
        options.append((label, option_text))
    return tuple(options)


_ANSWER_PREFIX = re.compile(r"^(?:answer|option|correct answer)\s*[:：]?\s*", re.IGNORECASE)
_ANSWER_LABEL = re.compile(r"^[(\[]?([A-Za-z])[)\]]?(?:[.):：,]|\s*$)")


def normalize_answer(answer: str, options: tuple[tuple[str, str], ...]) -> str:
    """Map ``B``, ``(B)``, ``B. text`` or the bare option text to its label."""
    s = answer.strip().strip("*'\"` ").strip()
    # A bare label wins even when some option's text is that same letter.
    if s in MC_LABELS:
        return s
    for label, text in options:
        if s == text:
            return label
    s = _ANSWER_PREFIX.sub("", s)
    m = _ANSWER_LABEL.match(s)
    if not m:
        raise ValidationError(f"cannot read an option label from {answer!r}", "mc.answer")
    letter = m.group(1)
    if letter.islower():
        if len(s) != 1:
            raise ValidationError(f"cannot read an option label from {answer!r}", "mc.answer")
        letter = letter.upper()
    if letter not in MC_LABELS:
        raise ValidationError(f"answer index {letter!r} is outside A-D", "mc.answer")
    return letter


def parse_mc_block(segment: str, offset: int = 0) -> McItem:
    fields = _fields(segment, offset)
    question = _require(fields, "Question", offset)
    options_text = _require(fields, "Options", offset)
    rationale = _require(fields, "Rationale", offset)
    answer = _require(fields, "Answer", offset)
    options = parse_options(options_text)
    return McItem(question, options, rationale, normalize_answer(answer, options))


def parse_short_block(segment: str, offset: int = 0) -> ShortItem:
    fields = _fields(segment, offset)
    if "Options" in fields:
        raise ParseError("second block is multiple-choice, expected a short-answer question", marker="###Options", position=offset)
    return ShortItem(_require(fields, "Question", offset), _require(fields, "Answer", offset))


def parse_generated_pair(response: str) -> GeneratedPair:
    text = _as_text(response).replace("\r\n", "\n")
    # Models sometimes copy the prompt's escaped "\n" literally.
    text = text.replace("\\n", "\n")
    parts = text.split(SEPARATOR)
    if len(parts) == 1:
        raise ParseError("missing separator [SEP]", marker=SEPARATOR)
    if len(parts) > 2:
        second = text.find(SEPARATOR, text.find(SEPARATOR) + 1)
        raise ParseError("more than one [SEP] separator", marker=SEPARATOR, position=second)
    mc = parse_mc_block(parts[0], 0)
    short = parse_short_block(parts[1], len(parts[0]) + len(SEPARATOR))
    return GeneratedPair(mc, short)


def format_options(options: tuple[tuple[str, str], ...], sep: str = ", ", label_punct: str = ".") -> str:
    return sep.join(f"{label}{label_punct} {text}" for label, text in options)


def format_mc(mc: McItem, *, sep: str = ", ", label_punct: str = ".", gap: str = "\n\n") -> str:
    return (
        f"###Question: {mc.question}{gap}"
        f"###Options: {format_options(mc.options, sep, label_punct)}{gap}"
        f"###Rationale: {mc.rationale}{gap}"
        f"###Answer: {mc.answer}"
    )


def format_short(short: ShortItem, *, gap: str = "\n\n") -> str:
    return f"###Question: {short.question}{gap}###Answer: {short.answer}"


def format_pair(pair: GeneratedPair, *, sep_gap: str = "\n\n") -> str:
    return f"{format_mc(pair.mc)}{sep_gap}{SEPARATOR}{sep_gap}{format_short(pair.short)}"


# ---------------------------------------------------------------- judge verdicts


CRITERIA = ("logically_consistent", "factually_accurate", "sound_reasoning")

_KEY_ALIASES = {
    "logically consistent": "logically_consistent",
    "logical consistency": "logically_consistent",
    "factually accurate": "factually_accurate",
    "factual accuracy": "factually_accurate",
    "sound reasoning": "sound_reasoning",
}


@dataclass(frozen=True)
class JudgeScores:
    logically_consistent: float
    factually_accurate: float
    sound_reasoning: float

    def __post_init__(self) -> None:
        for name in CRITERIA:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValidationError(f"score must be a finite number, got {value!r}", name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"score {value!r} is outside [0, 1]", name)
            object.__setattr__(self, name, float(value))

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in CRITERIA}

    @classmethod
    def zeros(cls) -> "JudgeScores":
        return cls(0.0, 0.0, 0.0)


def _balanced_object(text: str, start: int) -> str | None:
    depth = 0
    quote: str | None = None
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
            continue
        if ch in ("'", '"'):
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def _load_object(candidate: str) -> dict | None:
    try:
        obj = json.loads(candidate)
    except (ValueError, RecursionError):
        # Single-quoted pseudo-JSON is a Python literal; literal_eval never executes code.
        try:
            obj = ast.literal_eval(candidate)
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            return None
    return obj if isinstance(obj, dict) else None


def extract_json_object(text: str) -> tuple[dict, int]:
    """First parseable ``{...}`` in ``text`` and its offset; fences and prose are skipped."""
    pos = text.find("{")
    while pos >= 0:
        candidate = _balanced_object(text, pos)
        if candidate is not None:
            obj = _load_object(candidate)
            if obj is not None:
                return obj, pos
        pos = text.find("{", pos + 1)
    raise ParseError("no JSON object found in judge response")


def _canonical_key(key: Any) -> str | None:
    if not isinstance(key, str):
        return None
    k = re.sub(r"[\s_\-]+", " ", key).strip().lower()
    return _KEY_ALIASES.get(k)


def parse_judge(response: str) -> JudgeScores:
    text = _as_text(response)
    obj, offset = extract_json_object(text)
    values: dict[str, Any] = {}
    for key, value in obj.items():
        name = _canonical_key(key)
        if name is None:
            continue
        if name in values:
            raise ParseError(f"criterion {name!r} given twice", marker=str(key), position=offset)
        values[name] = value
    for name in CRITERIA:
        if name not in values:
            raise ParseError(f"missing criterion {name.replace('_', ' ')!r}", marker=name, position=offset)
        value = values[name]
        if isinstance(value, str):
            try:
                value = float(value.strip())
            except ValueError:
                raise ParseError(f"score for {name!r} is not a number: {value!r}", marker=name, position=offset) from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"score for {name!r} is not a number: {value!r}", marker=name, position=offset)
        values[name] = value
    return JudgeScores(**{name: values[name] for name in CRITERIA})
