from __future__ import annotations

import random
from dataclasses import replace

import pytest

from mifc.config import Aggregation, JudgeConfig, PipelineConfig
from mifc.core import DataSample, LanguageTag, SampleKind, serialize_sample
from mifc.errors import TransportError
from mifc.llm_client import CallableProvider, ChatExchange, RecordingProvider, ReplayProvider, ReplayStore
from mifc.metrics import CctsConfig, DeterministicEmbeddingProvider, score_round_trip
from mifc.parsing import CRITERIA, JudgeScores
from mifc.pipeline import (
    aggregate_verdict,
    expand_answers,
    generate_qa,
    judge_samples,
    translate_with_gate,
    translation_report,
)

EMB = DeterministicEmbeddingProvider()
CFG = PipelineConfig(concurrency_limit=4)


def judge(scores: tuple[float, float, float] | str, model: str = "judge") -> CallableProvider:
    text = scores if isinstance(scores, str) else "{'logically consistent':%s, 'factually accurate':%s, 'sound reasoning':%s}" % scores
    return CallableProvider(lambda p: text, model=model)


def raw(i: int, text: str, lang: str = "EN") -> DataSample:
    return DataSample(id=f"r{i}", lang=lang, kind="raw_text", source="web", raw_text=text)


def short(i: int, q: str, a: str, lang: str = "EN") -> DataSample:
    return DataSample(id=f"s{i}", lang=lang, kind="short_answer_qa", source="qa", question=q, answer=a)


def mc(i: int, lang: str = "EN") -> DataSample:
    return DataSample(
        id=f"m{i}", lang=lang, kind="multiple_choice_qa", source="exam",
        question=f"Which drug number {i} lowers glucose?",
        options=(("A", "Insulin"), ("B", "Glucagon"), ("C", "Cortisol"), ("D", "Adrenaline")),
        rationale="Insulin promotes uptake of glucose.", answer="A",
    )


# ---------------------------------------------------------------- judging


def test_mean_aggregation_is_exact():
    v = aggregate_verdict([JudgeScores(0.8, 0.8, 0.8), JudgeScores(1.0, 1.0, 1.0)], JudgeConfig())
    assert v.aggregated.as_dict() == {name: 0.9 for name in CRITERIA}
    assert v.accepted


def test_min_aggregation():
    cfg = JudgeConfig(aggregation=Aggregation.MIN)
    v = aggregate_verdict([JudgeScores(0.6, 1.0, 1.0), JudgeScores(1.0, 1.0, 1.0)], cfg)
    assert v.aggregated.logically_consistent == 0.6 and not v.accepted


def test_threshold_is_inclusive_per_criterion():
    assert aggregate_verdict([JudgeScores(0.7, 0.7, 0.7)], JudgeConfig()).accepted
    assert not aggregate_verdict([JudgeScores(1.0, 0.4, 1.0)], JudgeConfig()).accepted


# ---------------------------------------------------------------- expansion


def test_expand_replaces_answer_and_keeps_original():
    chat = CallableProvider(lambda p: "Insulin lowers blood glucose by moving it into cells.", model="gen")
    out, failures = expand_answers([short(1, "What does insulin do?", "lowers glucose, cells")], CFG, chat=chat)
    assert failures == []
    s = out[0]
    assert s.answer == "Insulin lowers blood glucose by moving it into cells."
    assert s.annotations["expand.original"] == "lowers glucose, cells"
    assert "###Answer Keywords: lowers glucose, cells" in chat.calls[0]
    assert "English doctor" in chat.calls[0]


def test_expand_routes_failures():
    def flaky(prompt: str) -> str:
        if "boom" in prompt:
            raise TransportError("down")
        return "ok answer"

    chat = CallableProvider(flaky)
    samples = [short(1, "q1", " , ; "), short(2, "boom?", "x"), raw(3, "text"), short(4, "q4", "fine")]
    out, failures = expand_answers(samples, CFG, chat=chat)
    assert [s.id for s in out] == ["s4"]
    kinds = {s.id: s.annotations["expand.error_kind"] for s in failures}
    assert kinds == {"s1": "validation", "s2": "transport", "r3": "validation"}


def test_expand_replay_is_byte_identical(tmp_path):
    samples = [short(i, f"糖尿病的症状{i}是什么？", f"多饮，多尿，体重下降{i}", lang="ZH") for i in range(20)]
    path = tmp_path / "rec.jsonl"
    live = RecordingProvider(CallableProvider(lambda p: "患者常见多饮、多尿和体重下降。" + p[-3:], model="gpt-4o-mini"), path)
    expand_answers(samples, CFG, chat=live)
    runs = []
    for _ in range(2):
        store = ReplayStore.load(path)
        out, failures = expand_answers(samples, CFG, chat=ReplayProvider(store, "gpt-4o-mini"))
        assert failures == []
        runs.append("\n".join(serialize_sample(s) for s in out))
    assert len(runs[0].splitlines()) == 20
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- QA generation


def article_truth(i: int) -> dict:
    return {
        "q": f"Which organ is affected in case {i}?",
        "opts": [("A", f"Kidney {i}"), ("B", "Liver"), ("C", "Lung"), ("D", "Skin")],
        "rat": f"Case {i} describes renal damage.",
        "ans": "A",
        "sq": f"What treatment is used in case {i}?",
        "sa": f"Dialysis for case {i}.",
    }


def generator_for(truth: dict[str, dict], malformed: set[str] = frozenset()) -> CallableProvider:
    def respond(prompt: str) -> str:
        body = prompt.rsplit("###Input: ", 1)[1]
        if prompt.startswith("You’re an experienced"):
            return "###Cleaned Text: " + body.strip()
        key = body.split("|", 1)[0]
        if key in malformed:
            return "###Question: no separator here\n###Answer: x"
        t = truth[key]
        opts = ", ".join(f"{l}. {x}" for l, x in t["opts"])
        return (f"###Question: {t['q']}\n\n###Options: {opts}\n\n###Rationale: {t['rat']}\n\n###Answer: {t['ans']}\n"
                f"[SEP]\n###Question: {t['sq']}\n\n###Answer: {t['sa']}")

    return CallableProvider(respond, model="gpt-4o-mini")


def test_generate_qa_accepts_with_perfect_judges():
    truth = {f"k{i}": article_truth(i) for i in range(3)}
    texts = [raw(i, f"k{i}|renal article {i}") for i in range(3)]
    gen = generator_for(truth)
    accepted, rejected = generate_qa(texts, CFG, generator=gen, judges=[judge((1.0, 1.0, 1.0), "j1"), judge((1.0, 1.0, 1.0), "j2")])
    assert rejected == []
    assert [s.id for s in accepted] == ["r0-mc", "r0-sa", "r1-mc", "r1-sa", "r2-mc", "r2-sa"]
    m, s = accepted[0], accepted[1]
    assert m.kind is SampleKind.MULTIPLE_CHOICE_QA and m.rationale == "Case 0 describes renal damage."
    assert s.kind is SampleKind.SHORT_ANSWER_QA and s.answer == "Dialysis for case 0."
    assert m.annotations["gen.judge.accepted"] is True
    assert m.annotations["gen.judge.0.model"] == "j1"
    assert m.annotations["gen.condensed"] == "k0|renal article 0"


def test_generate_qa_rejects_on_low_criterion():
    truth = {"k0": article_truth(0)}
    accepted, rejected = generate_qa([raw(0, "k0|x")], CFG, generator=generator_for(truth),
                                     judges=[judge((0.9, 0.4, 0.9)), judge((0.9, 0.4, 0.9))])
    assert accepted == []
    assert rejected[0].annotations["gen.reject_reason"] == "judge"
    assert rejected[0].annotations["gen.judge.factually_accurate"] == 0.4


def test_generate_qa_reprompts_once_then_rejects():
    truth = {"k0": article_truth(0)}
    gen = generator_for(truth, malformed={"k0"})
    accepted, rejected = generate_qa([raw(0, "k0|x")], CFG, generator=gen, judges=[judge((1.0, 1.0, 1.0))])
    assert accepted == [] and rejected[0].annotations["gen.reject_reason"] == "generation_format"
    gen_calls = [c for c in gen.calls if c.startswith("You’re a ")]
    assert len(gen_calls) == 2


def test_unparseable_judge_counts_as_zero():
    truth = {"k0": article_truth(0)}
    accepted, rejected = generate_qa([raw(0, "k0|x")], CFG, generator=generator_for(truth),
                                     judges=[judge("looks great!"), judge((1.0, 1.0, 1.0))])
    assert accepted == []
    ann = rejected[0].annotations
    assert ann["gen.judge.logically_consistent"] == 0.5
    assert "gen.judge.0.error" in ann


def test_generate_qa_rejects_wrong_kind_and_transport():
    def down(prompt):
        raise TransportError("503")

    accepted, rejected = generate_qa([mc(0), raw(1, "k|x")], CFG, generator=CallableProvider(down), judges=[judge((1, 1, 1))])
    assert [s.annotations["gen.reject_reason"] for s in rejected] == ["precondition", "transport"]


def test_generate_qa_replay_matches_ground_truth(tmp_path):
    truth = {f"k{i}": article_truth(i) for i in range(10)}
    texts = [raw(i, f"k{i}|article body {i}") for i in range(10)]
    path = tmp_path / "rec.jsonl"
    gen = RecordingProvider(generator_for(truth), path)
    judges = [RecordingProvider(judge((0.9, 0.9, 0.95), m), path) for m in ("gpt-4", "claude-3-5-sonnet")]
    generate_qa(texts, CFG, generator=gen, judges=judges)

    store = ReplayStore.load(path)
    accepted, rejected = generate_qa(
        texts, CFG, generator=ReplayProvider(store, "gpt-4o-mini"),
        judges=[ReplayProvider(store, "gpt-4"), ReplayProvider(store, "claude-3-5-sonnet")],
    )
    assert rejected == [] and len(accepted) == 20
    for i in range(10):
        t = truth[f"k{i}"]
        m, s = accepted[2 * i], accepted[2 * i + 1]
        assert (m.question, list(m.options), m.rationale, m.answer) == (t["q"], t["opts"], t["rat"], t["ans"])
        assert (s.question, s.answer) == (t["sq"], t["sa"])


def test_judge_samples_gate():
    accepted, rejected = judge_samples([mc(0), mc(1)], CFG, judges=[judge((0.8, 0.8, 0.8)), judge((1.0, 1.0, 1.0))])
    assert [s.id for s in accepted] == ["m0", "m1"]
    assert accepted[0].annotations["judge.logically_consistent"] == 0.9


# ---------------------------------------------------------------- translation


def identity_translator() -> CallableProvider:
    return CallableProvider(lambda p: p.rsplit("###Input: ", 1)[1], model="gpt-4o-mini")


def test_identity_round_trip_accepted():
    records, rejected = translate_with_gate([mc(0), short(1, "What lowers glucose?", "Insulin does.")], "KO", CFG, EMB,
                                            translator=identity_translator())
    assert rejected == []
    assert all(r.ccts == pytest.approx(1.0, abs=1e-9) and r.accepted for r in records)
    out = records[0].output
    assert out.id == "m0-ko" and out.lang is LanguageTag.KO and out.answer == "A"


def test_unrelated_back_translation_rejected():
    def respond(prompt: str) -> str:
        text = prompt.rsplit("###Input: ", 1)[1]
        return "KO:" + text if "to Korean" in prompt else "bicycles river festival bread"

    records, rejected = translate_with_gate([short(1, "What lowers glucose?", "Insulin does.")], "KO", CFG, EMB,
                                            translator=CallableProvider(respond))
    assert records == []
    assert rejected[0].annotations["translate.reject_reason"] == "below_threshold"
    assert rejected[0].annotations["translate.ccts"] < 0.3


def test_same_language_is_precondition_failure():
    _, rejected = translate_with_gate([short(1, "q", "a", lang="KO")], "KO", CFG, EMB, translator=identity_translator())
    assert rejected[0].annotations["translate.reject_reason"] == "precondition"


def test_translation_decisions_recompute_from_annotations():
    rng = random.Random(5)
    words = "insulin glucose blood kidney dialysis fever infection asthma inhaler pressure heart stroke".split()
    samples = [short(i, " ".join(rng.choices(words, k=6)) + "?", " ".join(rng.choices(words, k=8)) + ".") for i in range(50)]

    def respond(prompt: str) -> str:
        text = prompt.rsplit("###Input: ", 1)[1]
        if "to Korean" in prompt:
            return "번역 " + text
        back = text[len("번역 "):].split()
        # Corrupt a text-dependent number of words so scores spread around the gate.
        n = sum(map(ord, text)) % 4
        for j in range(n):
            back[(j * 3) % len(back)] = "zzz"
        return " ".join(back)

    cfg = replace(CFG, ccts=CctsConfig(accept_threshold=0.8))
    records, rejected = translate_with_gate(samples, "KO", cfg, EMB, translator=CallableProvider(respond), threshold=0.8)
    assert len(records) + len(rejected) == 50
    assert records and rejected
    by_id = {s.id: s for s in samples}
    for r in records:
        ann = r.output.annotations
        scores = [score_round_trip(by_id[r.source.id].__getattribute__(f), ann[f"translate.back.{f}"], cfg.ccts, EMB, lang=LanguageTag.EN).score
                  for f in ("question", "answer")]
        assert min(scores) == ann["translate.ccts"] == r.ccts
        assert r.ccts == pytest.approx(0.5 * r.bleu_mean + 0.5 * r.embed_score, abs=1e-9)
        assert (min(scores) > 0.8) is True
    for s in rejected:
        scores = [score_round_trip(getattr(s, f), s.annotations[f"translate.back.{f}"], cfg.ccts, EMB, lang=LanguageTag.EN).score
                  for f in ("question", "answer")]
        assert min(scores) == s.annotations["translate.ccts"]
        assert not min(scores) > 0.8
    report = translation_report(records, rejected, cfg)
    assert report["accepted"] + report["rejected"] == 50
    assert sum(report["ccts_histogram"]["bins"]) == 50


def test_translation_transport_failure():
    def down(prompt):
        raise TransportError("timeout")

    _, rejected = translate_with_gate([mc(0)], "FR", CFG, EMB, translator=CallableProvider(down))
    assert rejected[0].annotations["translate.reject_reason"] == "transport"


def test_outputs_keep_input_order_under_concurrency():
    chat = CallableProvider(lambda p: "expanded " + p[-6:])
    samples = [short(i, f"q{i}", f"kw{i}") for i in range(64)]
    out, _ = expand_answers(samples, replace(CFG, concurrency_limit=8), chat=chat)
    assert [s.id for s in out] == [s.id for s in samples]


def test_replay_store_shared_across_models():
    store = ReplayStore([ChatExchange("a", "p", "from a"), ChatExchange("b", "p", "from b")])
    assert ReplayProvider(store, "b").complete("p").response == "from b"
