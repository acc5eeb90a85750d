"""LLM-backed stages: answer expansion, QA generation with judge gating, and
round-trip-gated translation.

Each stage takes samples in, returns ``(accepted, rejected)`` in input order,
and never aborts on one bad record: failures land in ``rejected`` with a
reason annotation. Samples are processed by a pool of
``cfg.concurrency_limit`` threads.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

from .config import Aggregation, JudgeConfig, PipelineConfig
from .core import DataSample, LanguageTag, SampleKind
from .errors import MifcError, ParseError, TransportError, ValidationError
from .llm_client import (
    CONDENSE,
    DETERMINISTIC_TEMPERATURE,
    EXPAND_ANSWER,
    GEN_QA,
    JUDGE_QA,
    TRANSLATE,
    ChatProvider,
    make_provider,
    render,
)
from .metrics import CctsResult, EmbeddingProvider, score_round_trip
from .parsing import (
    CRITERIA,
    GeneratedPair,
    JudgeScores,
    format_options,
    format_pair,
    parse_condensed,
    parse_generated_pair,
    parse_judge,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

__all__ = [
    "JudgeConfig",
    "JudgeVerdict",
    "TranslationRecord",
    "aggregate_verdict",
    "expand_answers",
    "generate_qa",
    "judge_samples",
    "translate_with_gate",
]


def run_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, TransportError):
        return "transport"
    if isinstance(exc, ParseError):
        return "parse"
    return "validation"


# ---------------------------------------------------------------- answer expansion


_KEYWORD_SPLIT = re.compile(r"[,;，；、\n]+")


def answer_keywords(answer: str) -> list[str]:
    return [kw.strip() for kw in _KEYWORD_SPLIT.split(answer) if kw.strip()]


def _clean_expansion(response: str) -> str:
    text = response.strip()
    for marker in ("###Answer:", "###Complete Answer:"):
        if text.startswith(marker):
            text = text[len(marker) :].strip()
    if not text:
        raise ParseError("empty expansion")
    return text


def expand_answers(
    samples: Iterable[DataSample],
    cfg: PipelineConfig,
    *,
    chat: ChatProvider | None = None,
) -> tuple[list[DataSample], list[DataSample]]:
    """Rewrite keyword-style short answers as full sentences.

    Returns ``(expanded, failures)``. The original answer is kept under
    ``expand.original``.
    """
    chat = chat or make_provider(cfg.provider)

    def work(sample: DataSample) -> tuple[bool, DataSample]:
        try:
            if sample.kind is not SampleKind.SHORT_ANSWER_QA:
                raise ValidationError(f"expansion needs a short_answer_qa sample, got {sample.kind.value}", "kind")
            keywords = answer_keywords(sample.answer or "")
            if not keywords:
                raise ValidationError("answer has no keywords to expand", "answer")
            prompt = render(
                EXPAND_ANSWER,
                {"LANG": sample.lang.display_name, "question": sample.question, "answer_keywords": ", ".join(keywords)},
            )
            expanded = _clean_expansion(chat.complete(prompt).response)
        except MifcError as exc:
            return False, sample.annotate({"expand.error": str(exc), "expand.error_kind": _error_kind(exc)})
        out = sample.evolve(answer=expanded).annotate(
            {"expand.original": sample.answer, "expand.prompt": EXPAND_ANSWER.id.value, "expand.model": chat.model}
        )
        return True, out

    expanded: list[DataSample] = []
    failures: list[DataSample] = []
    for ok, sample in run_ordered(work, list(samples), cfg.concurrency_limit):
        (expanded if ok else failures).append(sample)
    return expanded, failures


# ---------------------------------------------------------------- judging


@dataclass(frozen=True)
class JudgeVerdict:
    per_judge: tuple[JudgeScores, ...]
    aggregated: JudgeScores
    accepted: bool
    errors: tuple[str | None, ...] = ()


def aggregate_verdict(per_judge: Sequence[JudgeScores], cfg: JudgeConfig, errors: Sequence[str | None] = ()) -> JudgeVerdict:
    if not per_judge:
        raise ValidationError("no judge scores to aggregate", "judge")
    agg = {}
    for name in CRITERIA:
        values = [getattr(s, name) for s in per_judge]
        if cfg.aggregation is Aggregation.MIN:
            agg[name] = min(values)
        else:
            agg[name] = math.fsum(values) / len(values)
    aggregated = JudgeScores(**agg)
    accepted = all(agg[name] >= cfg.per_criterion_threshold for name in CRITERIA)
    return JudgeVerdict(tuple(per_judge), aggregated, accepted, tuple(errors))


def run_judges(
    judges: Sequence[ChatProvider],
    lang: LanguageTag,
    context: str,
    qa_text: str,
    cfg: JudgeConfig,
) -> JudgeVerdict:
    """Ask every judge; an unparseable verdict counts as zeros for that judge."""
    prompt = render(JUDGE_QA, {"LANG": lang.display_name, "condensed_text": context, "qa_pair": qa_text})
    scores: list[JudgeScores] = []
    errors: list[str | None] = []
    for judge in judges:
        response = judge.complete(prompt).response
        try:
            scores.append(parse_judge(response))
            errors.append(None)
        except (ParseError, ValidationError) as exc:
            logger.info("judge %s gave an unusable verdict: %s", judge.model, exc)
            scores.append(JudgeScores.zeros())
            errors.append(str(exc))
    return aggregate_verdict(scores, cfg, errors)


def verdict_annotations(prefix: str, verdict: JudgeVerdict, judges: Sequence[ChatProvider], cfg: JudgeConfig) -> dict:
    ann: dict = {
        f"{prefix}.aggregation": cfg.aggregation.value,
        f"{prefix}.threshold": cfg.per_criterion_threshold,
        f"{prefix}.accepted": verdict.accepted,
    }
    for name in CRITERIA:
        ann[f"{prefix}.{name}"] = getattr(verdict.aggregated, name)
    for i, (judge, scores) in enumerate(zip(judges, verdict.per_judge)):
        ann[f"{prefix}.{i}.model"] = judge.model
        for name in CRITERIA:
            ann[f"{prefix}.{i}.{name}"] = getattr(scores, name)
        if i < len(verdict.errors) and verdict.errors[i]:
            ann[f"{prefix}.{i}.error"] = verdict.errors[i]
    return ann


def _judge_providers(cfg: PipelineConfig, judges: Sequence[ChatProvider] | None) -> list[ChatProvider]:
    if judges is not None:
        if not judges:
            raise ValidationError("at least one judge is required", "judge.judges")
        return list(judges)
    return [make_provider(j) for j in cfg.judge.judges]


def render_sample_qa(sample: DataSample) -> str:
    """The question-answer text a judge sees for an existing sample."""
    if sample.kind is SampleKind.MULTIPLE_CHOICE_QA:
        parts = [f"###Question: {sample.question}", f"###Options: {format_options(sample.options or ())}"]
        if sample.rationale:
            parts.append(f"###Rationale: {sample.rationale}")
        parts.append(f"###Answer: {sample.answer}")
        return "\n\n".join(parts)
    return f"###Question: {sample.question}\n\n###Answer: {sample.answer}"


def judge_samples(
    samples: Iterable[DataSample],
    cfg: PipelineConfig,
    *,
    judges: Sequence[ChatProvider] | None = None,
) -> tuple[list[DataSample], list[DataSample]]:
    """Gate existing QA samples with the judge panel.

    The judge context is the condensed source text recorded by
    :func:`generate_qa` when present, else the sample's own question.
    """
    panel = _judge_providers(cfg, judges)

    def work(sample: DataSample) -> tuple[bool, DataSample]:
        try:
            if sample.kind is SampleKind.RAW_TEXT:
                raise ValidationError("judging needs a QA sample", "kind")
            context = sample.annotations.get("gen.condensed") or sample.question
            verdict = run_judges(panel, sample.lang, str(context), render_sample_qa(sample), cfg.judge)
        except MifcError as exc:
            return False, sample.annotate({"judge.accepted": False, "judge.error": str(exc), "judge.error_kind": _error_kind(exc)})
        return verdict.accepted, sample.annotate(verdict_annotations("judge", verdict, panel, cfg.judge))

    accepted: list[DataSample] = []
    rejected: list[DataSample] = []
    for ok, sample in run_ordered(work, list(samples), cfg.concurrency_limit):
        (accepted if ok else rejected).append(sample)
    return accepted, rejected


# ---------------------------------------------------------------- QA generation


def _with_format_retries(call: Callable[[], T], retries: int) -> tuple[T, int]:
    attempt = 0
    while True:
        attempt += 1
        try:
            return call(), attempt
        except (ParseError, ValidationError):
            if attempt > retries:
                raise


def pair_to_samples(raw: DataSample, pair: GeneratedPair, annotations: Mapping) -> tuple[DataSample, DataSample]:
    base = dict(raw.annotations)
    base.update(annotations)
    mc = DataSample(
        id=f"{raw.id}-mc",
        lang=raw.lang,
        kind=SampleKind.MULTIPLE_CHOICE_QA,
        source=raw.source,
        question=pair.mc.question,
        options=pair.mc.options,
        rationale=pair.mc.rationale,
        answer=pair.mc.answer,
        annotations={**base, "gen.item": "mc"},
    )
    short = DataSample(
        id=f"{raw.id}-sa",
        lang=raw.lang,
        kind=SampleKind.SHORT_ANSWER_QA,
        source=raw.source,
        question=pair.short.question,
        answer=pair.short.answer,
        annotations={**base, "gen.item": "short"},
    )
    return mc, short


def generate_qa(
    raw: Iterable[DataSample],
    cfg: PipelineConfig,
    *,
    generator: ChatProvider | None = None,
    judges: Sequence[ChatProvider] | None = None,
) -> tuple[list[DataSample], list[DataSample]]:
    """Condense, generate one MC and one short-answer item, and gate them with the judges.

    Each accepted pair contributes two samples (``<id>-mc`` and ``<id>-sa``).
    A rejected input is returned once, annotated with ``gen.reject_reason``.
    """
    generator = generator or make_provider(cfg.provider)
    panel = _judge_providers(cfg, judges)
    prompts_used = ",".join(t.id.value for t in (CONDENSE, GEN_QA, JUDGE_QA))

    def reject(sample: DataSample, reason: str, **extra) -> tuple[bool, list[DataSample]]:
        return False, [sample.annotate({"gen.accepted": False, "gen.reject_reason": reason, **extra})]

    def work(sample: DataSample) -> tuple[bool, list[DataSample]]:
        if sample.kind is not SampleKind.RAW_TEXT:
            return reject(sample, "precondition", **{"gen.error": f"expected raw_text, got {sample.kind.value}"})
        lang = sample.lang.display_name
        state: dict = {}
        try:
            condense_prompt = render(CONDENSE, {"LANG": lang, "original_text": sample.raw_text})
            condensed, c_attempts = _with_format_retries(
                lambda: parse_condensed(generator.complete(condense_prompt).response), cfg.format_retries
            )
        except (ParseError, ValidationError) as exc:
            return reject(sample, "condense_format", **{"gen.error": str(exc)})
        except TransportError as exc:
            return reject(sample, "transport", **{"gen.error": str(exc)})

        gen_prompt = render(GEN_QA, {"LANG": lang, "condensed_text": condensed.text})

        def generate() -> GeneratedPair:
            response = generator.complete(gen_prompt).response
            state["response"] = response
            return parse_generated_pair(response)

        try:
            pair, g_attempts = _with_format_retries(generate, cfg.format_retries)
        except (ParseError, ValidationError) as exc:
            return reject(sample, "generation_format", **{"gen.error": str(exc), "gen.response": state.get("response", "")})
        except TransportError as exc:
            return reject(sample, "transport", **{"gen.error": str(exc)})

        try:
            verdict = run_judges(panel, sample.lang, condensed.text, format_pair(pair), cfg.judge)
        except TransportError as exc:
            return reject(sample, "transport", **{"gen.error": str(exc), "gen.response": state["response"]})

        ann = {
            "gen.from": sample.id,
            "gen.model": generator.model,
            "gen.prompts": prompts_used,
            "gen.condensed": condensed.text,
            "gen.condensed_lenient": condensed.lenient,
            "gen.attempts": c_attempts + g_attempts,
            "gen.accepted": verdict.accepted,
        }
        ann.update(verdict_annotations("gen.judge", verdict, panel, cfg.judge))
        if not verdict.accepted:
            ann["gen.reject_reason"] = "judge"
            ann["gen.response"] = state["response"]
            return False, [sample.annotate(ann)]
        return True, list(pair_to_samples(sample, pair, ann))

    accepted: list[DataSample] = []
    rejected: list[DataSample] = []
    for ok, out in run_ordered(work, list(raw), cfg.concurrency_limit):
        (accepted if ok else rejected).extend(out)
    return accepted, rejected


def generation_report(inputs: int, accepted: Sequence[DataSample], rejected: Sequence[DataSample]) -> dict:
    reasons: dict[str, int] = {}
    for s in rejected:
        reason = str(s.annotations.get("gen.reject_reason", "unknown"))
        reasons[reason] = reasons.get(reason, 0) + 1
    pairs = len(accepted) // 2
    return {
        "inputs": inputs,
        "pairs_accepted": pairs,
        "samples_emitted": len(accepted),
        "inputs_rejected": len(rejected),
        "reject_reasons": dict(sorted(reasons.items())),
        "acceptance_rate": pairs / inputs if inputs else 0.0,
    }


# ---------------------------------------------------------------- translation


@dataclass(frozen=True)
class FieldRoundTrip:
    name: str
    original: str
    forward: str
    back: str
    result: CctsResult


@dataclass(frozen=True)
class TranslationRecord:
    source: DataSample
    source_lang: LanguageTag
    target_lang: LanguageTag
    fields: tuple[FieldRoundTrip, ...]
    bleu_mean: float
    embed_score: float
    ccts: float
    accepted: bool
    output: DataSample | None = None

    @property
    def forward(self) -> dict[str, str]:
        return {f.name: f.forward for f in self.fields}

    @property
    def back(self) -> dict[str, str]:
        return {f.name: f.back for f in self.fields}


def translatable_fields(sample: DataSample) -> list[tuple[str, str]]:
    if sample.kind is SampleKind.RAW_TEXT:
        return [("raw_text", sample.raw_text or "")]
    fields = [("question", sample.question or "")]
    if sample.kind is SampleKind.SHORT_ANSWER_QA:
        fields.append(("answer", sample.answer or ""))
        return fields
    fields += [(f"option.{label}", text) for label, text in sample.options or ()]
    if sample.rationale:
        fields.append(("rationale", sample.rationale))
    return fields


def _clean_translation(response: str) -> str:
    text = response.strip()
    for marker in ("###Translation:", "###Output:"):
        if text.startswith(marker):
            text = text[len(marker) :].strip()
    if not text:
        raise ParseError("empty translation")
    return text


def translate_text(chat: ChatProvider, text: str, source: LanguageTag, target: LanguageTag) -> str:
    prompt = render(
        TRANSLATE,
        {"source_lang": source.display_name, "target_lang": target.display_name, "original_text": text},
    )
    return _clean_translation(chat.complete(prompt, temperature=DETERMINISTIC_TEMPERATURE).response)


def _translated_sample(sample: DataSample, target: LanguageTag, texts: Mapping[str, str], ann: Mapping) -> DataSample:
    changes: dict = {"id": f"{sample.id}-{target.value.lower()}", "lang": target}
    if sample.kind is SampleKind.RAW_TEXT:
        changes["raw_text"] = texts["raw_text"]
    else:
        changes["question"] = texts["question"]
        if sample.kind is SampleKind.SHORT_ANSWER_QA:
            changes["answer"] = texts["answer"]
        else:
            changes["options"] = tuple((label, texts[f"option.{label}"]) for label, _ in sample.options or ())
            if sample.rationale:
                changes["rationale"] = texts["rationale"]
    return sample.evolve(**changes).annotate(ann)


def translate_with_gate(
    samples: Iterable[DataSample],
    target: LanguageTag | str,
    cfg: PipelineConfig,
    provider: EmbeddingProvider,
    *,
    translator: ChatProvider | None = None,
    threshold: float | None = None,
) -> tuple[list[TranslationRecord], list[DataSample]]:
    """Translate each sample to ``target`` and keep it only if the round trip survives.

    Every text field is translated forward and back; the sample score is the
    lowest field score, and the sample is accepted when it is strictly above
    the threshold.
    """
    target = LanguageTag.parse(target)
    translator = translator or make_provider(cfg.provider)
    gate = cfg.ccts.accept_threshold if threshold is None else threshold
    ccfg = cfg.ccts

    def work(sample: DataSample) -> tuple[TranslationRecord | None, DataSample | None]:
        base = {"translate.target_lang": target.value, "translate.threshold": gate}
        if sample.lang is target:
            return None, sample.annotate({**base, "translate.accepted": False, "translate.reject_reason": "precondition",
                                          "translate.error": "sample is already in the target language"})
        results: list[FieldRoundTrip] = []
        try:
            for name, text in translatable_fields(sample):
                forward = translate_text(translator, text, sample.lang, target)
                back = translate_text(translator, forward, target, sample.lang)
                result = score_round_trip(text, back, ccfg, provider, lang=sample.lang)
                results.append(FieldRoundTrip(name, text, forward, back, result))
        except MifcError as exc:
            return None, sample.annotate({**base, "translate.accepted": False, "translate.reject_reason": _error_kind(exc),
                                          "translate.error": str(exc)})

        worst = min(results, key=lambda f: f.result.score)
        accepted = worst.result.score > gate
        ann = {
            **base,
            "translate.from": sample.id,
            "translate.source_lang": sample.lang.value,
            "translate.model": translator.model,
            "translate.prompt": TRANSLATE.id.value,
            "translate.lambda1": ccfg.lambda1,
            "translate.lambda2": ccfg.lambda2,
            "translate.tokenizer": worst.result.mode.value,
            "translate.ccts": worst.result.score,
            "translate.bleu_mean": worst.result.bleu_mean,
            "translate.embed": worst.result.embed,
            "translate.min_field": worst.name,
            "translate.accepted": accepted,
        }
        for f in results:
            ann[f"translate.field.{f.name}.ccts"] = f.result.score
            ann[f"translate.field.{f.name}.bleu_mean"] = f.result.bleu_mean
            ann[f"translate.field.{f.name}.embed"] = f.result.embed
            ann[f"translate.back.{f.name}"] = f.back
        if not accepted:
            ann["translate.reject_reason"] = "below_threshold"
            for f in results:
                ann[f"translate.forward.{f.name}"] = f.forward
        output = _translated_sample(sample, target, {f.name: f.forward for f in results}, ann) if accepted else None
        record = TranslationRecord(
            source=sample,
            source_lang=sample.lang,
            target_lang=target,
            fields=tuple(results),
            bleu_mean=worst.result.bleu_mean,
            embed_score=worst.result.embed,
            ccts=worst.result.score,
            accepted=accepted,
            output=output,
        )
        if accepted:
            return record, None
        return record, sample.annotate(ann)

    accepted_records: list[TranslationRecord] = []
    rejected: list[DataSample] = []
    for record, rejected_sample in run_ordered(work, list(samples), cfg.concurrency_limit):
        if rejected_sample is not None:
            rejected.append(rejected_sample)
        elif record is not None:
            accepted_records.append(record)
    return accepted_records, rejected


def score_histogram(values: Iterable[float], bins: int = 10, upper: float = 1.0) -> list[int]:
    counts = [0] * bins
    for v in values:
        idx = int(max(0.0, v) / upper * bins) if upper > 0 else 0
        counts[min(idx, bins - 1)] += 1
    return counts


def translation_report(accepted: Sequence[TranslationRecord], rejected: Sequence[DataSample], cfg: PipelineConfig) -> dict:
    scores = [r.ccts for r in accepted]
    scores += [float(s.annotations["translate.ccts"]) for s in rejected if "translate.ccts" in s.annotations]
    reasons: dict[str, int] = {}
    for s in rejected:
        reason = str(s.annotations.get("translate.reject_reason", "unknown"))
        reasons[reason] = reasons.get(reason, 0) + 1
    total = len(accepted) + len(rejected)
    upper = max(1.0, cfg.ccts.lambda1 + cfg.ccts.lambda2)
    return {
        "inputs": total,
        "accepted": len(accepted),
        "rejected": len(rejected),
        "reject_reasons": dict(sorted(reasons.items())),
        "acceptance_rate": len(accepted) / total if total else 0.0,
        "ccts_histogram": {"upper": upper, "bins": score_histogram(scores, 10, upper)},
    }
