"""Chat-completion access for the generation, judging and translation stages.

Three interchangeable providers implement :class:`ChatProvider`:

* :class:`ChatClient` talks to any endpoint that accepts the usual
  ``POST {base_url}/chat/completions`` body;
* :class:`ReplayProvider` answers from a JSONL file of recorded exchanges,
  which is what the tests and the golden run use;
* :class:`CallableProvider` wraps a plain function, handy for mocks.

The prompt bodies are kept verbatim, placeholders aside.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import httpx

from .core import dumps_line
from .errors import ConfigError, FormatError, RenderError, TransportError, ValidationError

logger = logging.getLogger(__name__)

GENERATION_TEMPERATURE = 0.7
DETERMINISTIC_TEMPERATURE = 0.0


# ---------------------------------------------------------------- templates


class TemplateId(str, enum.Enum):
    CONDENSE = "condense"
    GEN_QA = "gen_qa"
    EXPAND_ANSWER = "expand_answer"
    JUDGE_QA = "judge_qa"
    TRANSLATE = "translate"


_PLACEHOLDER = re.compile(r"\{([A-Za-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    body: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER.findall(self.body)))


CONDENSE = PromptTemplate(
    TemplateId.CONDENSE,
    "You’re an experienced {LANG} doctor, I have some medical texts in {LANG} that were extracted from "
    "several websites. Your task is to clean the texts and make them easy to read. Here are some detailed "
    "requirements:\n\n"
    "1. You must ignore all links, references, and unknown characters. You MUST KEEP ALL MEDICAL-RELATED "
    "CONTENT in the texts.\n\n"
    "2. Give the cleaned text directly without any other unnecessary words following the format of "
    "###Cleaned Text: you cleaned text.\n\n"
    "User Input: ###Input: {original_text}",
)

GEN_QA = PromptTemplate(
    TemplateId.GEN_QA,
    "You’re a {LANG} medical expert tasked with creating medical questions and answers based on the short "
    "article provided. Here are the requirements:\n\n"
    "1. For each article you read, you MUST create two types of questions: multiple-choice and short "
    "answers. One question for each type.\n\n"
    "2. For the multiple-choice question, you MUST generate the answer choice in the following format: "
    "'###Question: your generated question\\n\\n###Options: A. optionA, B. optionB, C. optionC, D. "
    "optionD\\n\\n###Rationale: your explanation\\n\\n###Answer: correct answer index'\n\n"
    "3. For the short answer question, You MUST use this format instead: '###Question: your generated "
    "question\\n\\n###Answer: your detailed answer and explanation'.\n\n"
    "4. Multiple Choice and Short Answer questions you provided should in DIFFERENT TOPICS.\n\n"
    "5. You MUST separate two questions by the separation symbol [SEP]. Complete the multiple-choice "
    "question first, and then switch to the short answer question.\n\n"
    "6. You MUST strictly follow the above instructions, with NO OTHER UNNECESSARY WORDS in the output.\n\n"
    "User Input: ###Input: {condensed_text}",
)

EXPAND_ANSWER = PromptTemplate(
    TemplateId.EXPAND_ANSWER,
    "You are an experienced {LANG} doctor who is tasked with answering general medical questions. Here "
    "are some detailed requirements:\n\n"
    "1. I have the answer keywords for each question. I want you to expand and write complete sentences "
    "based on the question, and answer keywords provided.\n\n"
    "2. Your answer MUST based on the keywords, no new stuff should be present. Give me the complete "
    "answer directly in {LANG}.\n\n"
    "User Input: ###Question: {question}, ###Answer Keywords: {answer_keywords}",
)

JUDGE_QA = PromptTemplate(
    TemplateId.JUDGE_QA,
    "You are an experienced and knowledgable {LANG} medical school professor. You are given a short text "
    "paired with a question-answer pair that is created based on the text. Your task is to verify the "
    "correctness of the question-answer pair. Here are some detailed requirements.\n\n"
    "1. Based on the text provided, check whether the question-answer pair is logically consistent, "
    "factually accurate, and sound reasoning. Assign a CONTINOUS score BETWEEN 0 AND 1 for each of the "
    "criteria.\n\n"
    "2. Only return a JSON dictionary containing THREE KEY-VALUE pairs. Here is an example that you can "
    "refer to: {'logically consistent':0.9, 'factually accurate':0.85, 'sound reasoning':1.0}\n\n"
    "User Input: ###Context: {condensed_text}###Input: {qa_pair}",
)

# No translation prompt is published for the round-trip step; this one keeps
# the same "User Input" framing as the others.
TRANSLATE = PromptTemplate(
    TemplateId.TRANSLATE,
    "You are a professional medical translator. Translate the following medical text from {source_lang} "
    "to {target_lang}. Keep every medical term, number and unit accurate, and do not add or omit any "
    "information. Give the translation directly without any other unnecessary words.\n\n"
    "User Input: ###Input: {original_text}",
)

TEMPLATES: dict[TemplateId, PromptTemplate] = {
    t.id: t for t in (CONDENSE, GEN_QA, EXPAND_ANSWER, JUDGE_QA, TRANSLATE)
}


def render(template: PromptTemplate | TemplateId | str, bindings: Mapping[str, str]) -> str:
    """Substitute every ``{name}`` placeholder; values are inserted verbatim."""
    if not isinstance(template, PromptTemplate):
        template = TEMPLATES[TemplateId(template)]
    for name in template.placeholders:
        if name not in bindings:
            raise RenderError(name)
    # One pass with a callback so braces inside bound values are left alone.
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template.body)


# ---------------------------------------------------------------- config & exchange


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o-mini"
    api_key_env: str = "MIFC_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    temperature: float = GENERATION_TEMPERATURE
    backoff_base: float = 1.0

    def __post_init__(self) -> None:
        if not self.base_url or not re.match(r"^https?://", self.base_url):
            raise ValidationError(f"must be an http(s) URL, got {self.base_url!r}", "provider.base_url")
        if not self.model_name:
            raise ValidationError("must be non-empty", "provider.model_name")
        if not self.api_key_env:
            raise ValidationError("must be non-empty", "provider.api_key_env")
        if isinstance(self.max_in_flight, bool) or int(self.max_in_flight) != self.max_in_flight or self.max_in_flight < 1:
            raise ValidationError(f"must be an integer >= 1, got {self.max_in_flight!r}", "provider.max_in_flight")
        if isinstance(self.max_retries, bool) or int(self.max_retries) != self.max_retries or not 0 <= self.max_retries <= 10:
            raise ValidationError(f"must be an integer in [0, 10], got {self.max_retries!r}", "provider.max_retries")
        if self.timeout <= 0:
            raise ValidationError("must be positive", "provider.timeout")
        if self.temperature < 0:
            raise ValidationError("must be >= 0", "provider.temperature")
        if self.backoff_base < 0:
            raise ValidationError("must be >= 0", "provider.backoff_base")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], **defaults: Any) -> "ProviderConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", "provider")
        return cls(**{**defaults, **data})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ChatExchange:
    model: str
    prompt: str
    response: str
    temperature: float | None = None
    system: str | None = None
    usage: Mapping[str, int] | None = None
    latency: float = 0.0
    attempt: int = 1

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"model": self.model, "prompt": self.prompt, "response": self.response}
        if self.temperature is not None:
            rec["temperature"] = self.temperature
        if self.system is not None:
            rec["system"] = self.system
        if self.usage is not None:
            rec["usage"] = dict(self.usage)
        rec["latency"] = round(self.latency, 6)
        rec["attempt"] = self.attempt
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "ChatExchange":
        return cls(
            model=rec["model"],
            prompt=rec["prompt"],
            response=rec["response"],
            temperature=rec.get("temperature"),
            system=rec.get("system"),
            usage=rec.get("usage"),
            latency=float(rec.get("latency", 0.0)),
            attempt=int(rec.get("attempt", 1)),
        )


class ChatProvider(Protocol):
    model: str

    def complete(self, prompt: str, *, temperature: float | None = None) -> ChatExchange: ...


# ---------------------------------------------------------------- HTTP client


RETRYABLE_STATUS = frozenset({408, 409, 425, 429})


def _is_retryable(status: int) -> bool:
    return status in RETRYABLE_STATUS or status >= 500


class ChatClient:
    """HTTP chat-completion client with bounded concurrency and retry/backoff.

    Safe to share between threads. At most ``cfg.max_in_flight`` requests are
    on the wire at once; waiting for a retry does not hold a slot.
    """

    def __init__(
        self,
        cfg: ProviderConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {cfg.api_key_env} is not set")
        self.cfg = cfg
        self.model = cfg.model_name
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)
        self._http = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            timeout=cfg.timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def backoff_delay(self, attempt: int, retry_after: float | None = None) -> float:
        delay = self.cfg.backoff_base * 2 ** (attempt - 1)
        with self._rng_lock:
            delay += self._rng.uniform(0, delay * 0.25)
        if retry_after is not None:
            delay = max(delay, retry_after)
        return delay

    def complete(self, prompt: str, *, temperature: float | None = None) -> ChatExchange:
        temp = self.cfg.temperature if temperature is None else temperature
        body = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temp,
        }
        last_status: int | None = None
        last_error = "no attempt made"
        attempts = self.cfg.max_retries + 1
        for attempt in range(1, attempts + 1):
            retry_after = None
            started = time.monotonic()
            try:
                with self._slots:
                    resp = self._http.post("/chat/completions", json=body)
            except (httpx.TimeoutException, httpx.NetworkError, httpx.RemoteProtocolError) as exc:
                last_status, last_error = None, f"{type(exc).__name__}: {exc}"
            else:
                latency = time.monotonic() - started
                if resp.status_code == 200:
                    text, usage = _read_completion(resp)
                    return ChatExchange(
                        model=self.cfg.model_name,
                        prompt=prompt,
                        response=text,
                        temperature=temp,
                        usage=usage,
                        latency=latency,
                        attempt=attempt,
                    )
                last_status = resp.status_code
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if not _is_retryable(resp.status_code):
                    raise TransportError(f"{self.cfg.model_name}: {last_error}", status=last_status, attempts=attempt)
                retry_after = _retry_after(resp)
            if attempt < attempts:
                delay = self.backoff_delay(attempt, retry_after)
                logger.info("retrying %s in %.2fs after %s (attempt %d)", self.cfg.model_name, delay, last_error, attempt)
                self._sleep(delay)
        raise TransportError(
            f"{self.cfg.model_name}: giving up after {attempts} attempts: {last_error}",
            status=last_status,
            attempts=attempts,
        )


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


def _read_completion(resp: httpx.Response) -> tuple[str, dict[str, int] | None]:
    try:
        payload = resp.json()
        text = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion payload: {exc}", status=resp.status_code) from exc
    if not isinstance(text, str):
        raise TransportError("completion content is not text", status=resp.status_code)
    usage = payload.get("usage")
    if isinstance(usage, dict):
        usage = {k: v for k, v in usage.items() if isinstance(v, int)}
    else:
        usage = None
    return text, usage


_SHARED_CLIENTS: dict[ProviderConfig, ChatClient] = {}
_SHARED_LOCK = threading.Lock()


def shared_client(cfg: ProviderConfig) -> ChatClient:
    """One client per distinct config, so ``max_in_flight`` is process-wide."""
    with _SHARED_LOCK:
        client = _SHARED_CLIENTS.get(cfg)
        if client is None:
            client = _SHARED_CLIENTS[cfg] = ChatClient(cfg)
        return client


def complete(cfg: ProviderConfig, prompt: str, *, temperature: float | None = None) -> ChatExchange:
    return shared_client(cfg).complete(prompt, temperature=temperature)


# ---------------------------------------------------------------- record / replay


def exchange_key(model: str, prompt: str) -> str:
    return hashlib.sha256(f"{model}\x00{prompt}".encode("utf-8")).hexdigest()


class ReplayStore:
    """Recorded exchanges indexed by (model, prompt).

    Identical requests are answered with the recorded responses in file
    order; once they run out the last one repeats, like a deterministic model.
    """

    def __init__(self, exchanges: list[ChatExchange] | None = None):
        self._by_key: dict[str, list[ChatExchange]] = {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        for ex in exchanges or []:
            self.add(ex)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "ReplayStore":
        exchanges = []
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot open replay file {path}: {exc}") from exc
        with fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    exchanges.append(ChatExchange.from_record(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise FormatError(f"bad replay record: {exc}", line_no, str(path)) from None
        return cls(exchanges)

    def add(self, exchange: ChatExchange) -> None:
        with self._lock:
            self._by_key.setdefault(exchange_key(exchange.model, exchange.prompt), []).append(exchange)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_key.values())

    def lookup(self, model: str, prompt: str) -> ChatExchange:
        key = exchange_key(model, prompt)
        with self._lock:
            recorded = self._by_key.get(key)
            if not recorded:
                raise TransportError(f"no recorded exchange for model {model!r} (key {key[:12]})")
            i = self._cursor.get(key, 0)
            self._cursor[key] = i + 1
            return recorded[min(i, len(recorded) - 1)]


class ReplayProvider:
    def __init__(self, store: ReplayStore, model: str):
        self.store = store
        self.model = model

    def complete(self, prompt: str, *, temperature: float | None = None) -> ChatExchange:
        rec = self.store.lookup(self.model, prompt)
        return ChatExchange(
            model=self.model,
            prompt=prompt,
            response=rec.response,
            temperature=temperature,
            usage=rec.usage,
            latency=0.0,
            attempt=1,
        )


# Several recorders (generator plus judges) usually share one file.
_RECORD_LOCK = threading.Lock()


class RecordingProvider:
    """Pass-through that appends every successful exchange to a JSONL file."""

    def __init__(self, inner: ChatProvider, path: str | os.PathLike[str]):
        self.inner = inner
        self.model = inner.model
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def complete(self, prompt: str, *, temperature: float | None = None) -> ChatExchange:
        ex = self.inner.complete(prompt, temperature=temperature)
        with _RECORD_LOCK, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(dumps_line(ex.to_record()) + "\n")
        return ex


@dataclass
class CallableProvider:
    """Adapter turning ``fn(prompt) -> response`` into a provider."""

    fn: Callable[[str], str]
    model: str = "mock"
    calls: list[str] = field(default_factory=list)

    def complete(self, prompt: str, *, temperature: float | None = None) -> ChatExchange:
        self.calls.append(prompt)
        return ChatExchange(model=self.model, prompt=prompt, response=self.fn(prompt), temperature=temperature)


def make_provider(
    cfg: ProviderConfig,
    *,
    replay: ReplayStore | None = None,
    record_path: str | os.PathLike[str] | None = None,
) -> ChatProvider:
    if replay is not None:
        return ReplayProvider(replay, cfg.model_name)
    provider: ChatProvider = shared_client(cfg)
    if record_path is not None:
        provider = RecordingProvider(provider, record_path)
    return provider
