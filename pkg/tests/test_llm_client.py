from __future__ import annotations

import json
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from mifc.errors import ConfigError, FormatError, RenderError, TransportError, ValidationError
from mifc.llm_client import (
    TEMPLATES,
    CallableProvider,
    ChatClient,
    ChatExchange,
    ProviderConfig,
    RecordingProvider,
    ReplayProvider,
    ReplayStore,
    TemplateId,
    make_provider,
    render,
)

KEY = "sk-test-0123456789"


@pytest.fixture(autouse=True)
def api_key(monkeypatch):
    monkeypatch.setenv("MIFC_API_KEY", KEY)


def completion(text: str, status: int = 200, **headers) -> httpx.Response:
    body = {"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 2}}
    return httpx.Response(status, json=body, headers=headers)


def echo(request: httpx.Request) -> httpx.Response:
    return completion(json.loads(request.content)["messages"][0]["content"])


def client(handler, **cfg) -> tuple[ChatClient, list[float]]:
    sleeps: list[float] = []
    c = ChatClient(ProviderConfig(base_url="http://llm.test/v1", **cfg), transport=httpx.MockTransport(handler),
                   sleep=sleeps.append, rng=random.Random(0))
    return c, sleeps


# ---------------------------------------------------------------- templates


def full_bindings(template_id: TemplateId) -> dict[str, str]:
    return {name: f"<{name}>" for name in TEMPLATES[template_id].placeholders}


@pytest.mark.parametrize("tid", list(TemplateId))
def test_render_leaves_no_placeholders(tid):
    out = render(tid, full_bindings(tid))
    assert not re.search(r"\{[A-Za-z_]+\}", out)


def test_render_condense():
    out = render(TemplateId.CONDENSE, {"LANG": "French", "original_text": "t"})
    assert "French doctor" in out and out.endswith("###Input: t")
    assert "{" not in out


def test_gen_qa_mentions_separator():
    assert "[SEP]" in render(TemplateId.GEN_QA, {"LANG": "English", "condensed_text": "x"})


def test_judge_mentions_criteria_and_keeps_example_dict():
    out = render(TemplateId.JUDGE_QA, {"LANG": "English", "condensed_text": "c", "qa_pair": "q"})
    for name in ("logically consistent", "factually accurate", "sound reasoning"):
        assert name in out
    assert "{'logically consistent':0.9, 'factually accurate':0.85, 'sound reasoning':1.0}" in out


def test_render_missing_placeholder_names_it():
    with pytest.raises(RenderError) as exc:
        render(TemplateId.EXPAND_ANSWER, {"LANG": "English", "question": "q"})
    assert "answer_keywords" in str(exc.value)


def test_render_does_not_expand_braces_in_values():
    out = render(TemplateId.CONDENSE, {"LANG": "English", "original_text": "{LANG} {x}"})
    assert out.endswith("###Input: {LANG} {x}")


# ---------------------------------------------------------------- client


def test_echo_and_wire_format():
    seen = []

    def handler(request):
        seen.append(request)
        return echo(request)

    c, _ = client(handler, temperature=0.7)
    ex = c.complete("hello 血糖")
    assert ex.response == "hello 血糖" and ex.attempt == 1
    assert ex.usage == {"prompt_tokens": 3, "completion_tokens": 2}
    req = seen[0]
    assert req.method == "POST" and req.url.path == "/v1/chat/completions"
    body = json.loads(req.content)
    assert body == {"model": "gpt-4o-mini", "messages": [{"role": "user", "content": "hello 血糖"}], "temperature": 0.7}
    assert req.headers["authorization"] == f"Bearer {KEY}"
    assert KEY.encode() not in req.content


def test_retry_then_success():
    calls = []

    def handler(request):
        calls.append(1)
        return completion("x", 503) if len(calls) < 3 else completion("ok")

    c, sleeps = client(handler, max_retries=3)
    ex = c.complete("p")
    assert ex.response == "ok" and ex.attempt == 3
    assert len(sleeps) == 2
    assert 1.0 <= sleeps[0] <= 1.25 and 2.0 <= sleeps[1] <= 2.5


def test_timeouts_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return completion("ok")

    c, _ = client(handler)
    assert c.complete("p").attempt == 2


def test_retry_after_is_honoured():
    calls = []

    def handler(request):
        calls.append(1)
        return completion("x", 429, **{"Retry-After": "7"}) if len(calls) == 1 else completion("ok")

    c, sleeps = client(handler)
    c.complete("p")
    assert sleeps == [7.0]


def test_exhausted_retries_carry_last_status():
    c, sleeps = client(lambda r: completion("x", 502), max_retries=2)
    with pytest.raises(TransportError) as exc:
        c.complete("p")
    assert exc.value.status == 502 and exc.value.attempts == 3
    assert len(sleeps) == 2


@pytest.mark.parametrize("status", [400, 401, 403, 404, 422])
def test_client_errors_fail_immediately(status):
    calls = []

    def handler(request):
        calls.append(1)
        return completion("x", status)

    c, sleeps = client(handler)
    with pytest.raises(TransportError) as exc:
        c.complete("p")
    assert exc.value.status == status and len(calls) == 1 and sleeps == []


def test_malformed_payload_is_transport_error():
    c, _ = client(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(TransportError):
        c.complete("p")


def test_bounded_concurrency():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.005)
        with lock:
            state["now"] -= 1
        return echo(request)

    c, _ = client(handler, max_in_flight=4)
    with ThreadPoolExecutor(32) as pool:
        results = list(pool.map(lambda i: c.complete(f"p{i}").response, range(100)))
    assert results == [f"p{i}" for i in range(100)]
    assert 1 <= state["peak"] <= 4


def test_missing_key_is_config_error(monkeypatch):
    monkeypatch.delenv("MIFC_API_KEY")
    with pytest.raises(ConfigError):
        ChatClient(ProviderConfig())


@pytest.mark.parametrize(
    "kwargs", [{"max_in_flight": 0}, {"max_retries": 11}, {"base_url": "ftp://x"}, {"temperature": -1}, {"model_name": ""}]
)
def test_provider_config_validation(kwargs):
    with pytest.raises(ValidationError):
        ProviderConfig(**kwargs)


# ---------------------------------------------------------------- record / replay


def test_record_then_replay(tmp_path):
    path = tmp_path / "rec.jsonl"
    live = CallableProvider(lambda p: p.upper(), model="m1")
    rec = RecordingProvider(live, path)
    assert rec.complete("abc").response == "ABC"
    rec.complete("def")
    store = ReplayStore.load(path)
    assert len(store) == 2
    replay = ReplayProvider(store, "m1")
    assert replay.complete("def").response == "DEF"
    with pytest.raises(TransportError):
        ReplayProvider(store, "other-model").complete("abc")
    with pytest.raises(TransportError):
        replay.complete("never recorded")


def test_replay_serves_repeats_in_order():
    store = ReplayStore([ChatExchange("m", "p", "first"), ChatExchange("m", "p", "second")])
    r = ReplayProvider(store, "m")
    assert [r.complete("p").response for _ in range(3)] == ["first", "second", "second"]


def test_make_provider_prefers_replay():
    store = ReplayStore([ChatExchange("gpt-4o-mini", "p", "r")])
    assert make_provider(ProviderConfig(), replay=store).complete("p").response == "r"


def test_bad_replay_file(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"model": "m"}\n', encoding="utf-8")
    with pytest.raises(FormatError) as exc:
        ReplayStore.load(p)
    assert exc.value.line == 1
    with pytest.raises(ConfigError):
        ReplayStore.load(tmp_path / "missing.jsonl")
