"""Completion backends: remote chat APIs and offline mock oracles.

Every call goes through `Backend.complete`, which layers a disk cache, a
per-backend rate limiter, retry with exponential backoff and a cost ledger
over the provider-specific request.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .corpus import QrelSet
from .errors import BudgetError, TransportError, XlrrError
from .prompts import estimate_tokens

log = logging.getLogger(__name__)

OPENAI_KEY_ENV = "XLRR_OPENAI_KEY"
ANTHROPIC_KEY_ENV = "XLRR_ANTHROPIC_KEY"
ANTHROPIC_VERSION = "2023-06-01"


class Provider(str, Enum):
    OPENAI = "openai_compatible"
    ANTHROPIC = "anthropic_compatible"
    MOCK = "mock"


DEFAULT_ENDPOINTS = {
    Provider.OPENAI: "https://api.openai.com/v1/chat/completions",
    Provider.ANTHROPIC: "https://api.anthropic.com/v1/messages",
    Provider.MOCK: "",
}


class MockBehavior(str, Enum):
    IDENTITY = "identity_order"
    REVERSE = "reverse_order"
    QRELS_PERFECT = "qrels_perfect"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class MockScript:
    behavior: MockBehavior
    scripted_responses: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "behavior", MockBehavior(self.behavior))
        object.__setattr__(self, "scripted_responses", tuple(self.scripted_responses))
        if self.behavior is MockBehavior.SCRIPTED and not self.scripted_responses:
            raise XlrrError("scripted mock needs at least one response")


@dataclass(frozen=True)
class BackendConfig:
    provider: Provider
    model_name: str
    endpoint_url: str = ""
    temperature: float = 0.0
    max_completion_tokens: int = 1024
    context_limit: int = 4096
    price_per_1k_prompt: float = 0.0
    price_per_1k_completion: float = 0.0
    max_retries: int = 5
    requests_per_minute: int = 0
    seed: int | None = 0
    max_in_flight: int = 4
    # Completion tokens a reasoning model spends before its visible answer.
    reasoning_reserve: int = 0

    def __post_init__(self):
        object.__setattr__(self, "provider", Provider(self.provider))
        if not self.endpoint_url:
            object.__setattr__(self, "endpoint_url", DEFAULT_ENDPOINTS[self.provider])
        if self.temperature < 0:
            raise XlrrError("temperature must be >= 0")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise XlrrError("max_retries must be >= 0 and max_in_flight >= 1")


def load_model_table(path: str | os.PathLike | None = None) -> dict[str, dict]:
    if path is None:
        text = resources.files("xlrr").joinpath("data", "models.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return json.loads(text)


def preset_for(model_name: str, table: dict[str, dict] | None = None) -> dict:
    """Longest table entry that prefixes `model_name` (``gpt-4o-mini-2024-07-18`` -> ``gpt-4o-mini``)."""
    table = load_model_table() if table is None else table
    matches = [k for k in table if model_name.startswith(k)]
    if not matches:
        raise XlrrError(f"no model preset matches {model_name!r}; known: {sorted(table)}")
    return dict(table[max(matches, key=len)])


def config_for_model(model_name: str, table: dict[str, dict] | None = None, **overrides) -> BackendConfig:
    preset = preset_for(model_name, table)
    preset.update({k: v for k, v in overrides.items() if v is not None})
    return BackendConfig(model_name=model_name, **preset)


@dataclass(frozen=True)
class CompletionRequest:
    user_text: str
    system_text: str | None = None
    request_tag: str = ""
    # Consumed only by the qrels_perfect mock; not part of the cache key.
    window_ids: tuple[str, ...] = ()
    query_id: str | None = None

    def __post_init__(self):
        if not self.user_text:
            raise XlrrError("user_text must be non-empty")

    @property
    def token_estimate(self) -> int:
        return estimate_tokens(self.system_text or "") + estimate_tokens(self.user_text)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    cached: bool = False


def cache_key(cfg: BackendConfig, req: CompletionRequest) -> str:
    material = [cfg.provider.value, cfg.model_name, repr(float(cfg.temperature)), req.system_text, req.user_text]
    blob = json.dumps(material, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class ModelUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    request_count: int = 0
    total_cost: float = 0.0
    price_per_1k_prompt: float = 0.0
    price_per_1k_completion: float = 0.0

    def recomputed_cost(self) -> float:
        return (
            self.prompt_tokens * self.price_per_1k_prompt
            + self.completion_tokens * self.price_per_1k_completion
        ) / 1000


class CostLedger:
    """Thread-safe per-model token and cost accumulators."""

    def __init__(self):
        self._lock = threading.Lock()
        self.models: dict[str, ModelUsage] = {}

    def record(self, cfg: BackendConfig, prompt_tokens: int, completion_tokens: int) -> None:
        cost = (
            prompt_tokens * cfg.price_per_1k_prompt + completion_tokens * cfg.price_per_1k_completion
        ) / 1000
        with self._lock:
            usage = self.models.setdefault(
                cfg.model_name, ModelUsage(price_per_1k_prompt=cfg.price_per_1k_prompt,
                                           price_per_1k_completion=cfg.price_per_1k_completion)
            )
            usage.prompt_tokens += prompt_tokens
            usage.completion_tokens += completion_tokens
            usage.request_count += 1
            usage.total_cost += cost

    @property
    def total_cost(self) -> float:
        with self._lock:
            return sum(u.total_cost for u in self.models.values())

    def summary(self) -> dict[str, dict]:
        with self._lock:
            return {
                name: {
                    "prompt_tokens": u.prompt_tokens,
                    "completion_tokens": u.completion_tokens,
                    "request_count": u.request_count,
                    "total_cost": round(u.total_cost, 9),
                }
                for name, u in sorted(self.models.items())
            }


class ResponseCache:
    """One JSON record per key. With ``directory=None`` the cache lives in memory."""

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> dict | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.directory is None:
            return None
        path = self.directory / key
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            log.warning("ignoring unreadable cache record %s", path)
            return None
        with self._lock:
            self._memory[key] = record
        return record

    def put(self, key: str, record: dict) -> None:
        with self._lock:
            self._memory[key] = record
        if self.directory is None:
            return
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{key}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(record, fh, ensure_ascii=False, sort_keys=True, indent=1)
        os.replace(tmp, self.directory / key)


class RateLimiter:
    """Sliding one-minute window; ``requests_per_minute <= 0`` disables it."""

    def __init__(self, requests_per_minute: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rpm = requests_per_minute
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rpm <= 0:
            return
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.rpm:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(wait)


def qrels_perfect_response(window_ids: Sequence[str], qrels: QrelSet, query_id: str) -> str:
    """Rank window positions by descending grade; equal grades keep window order."""
    order = sorted(range(len(window_ids)), key=lambda i: -qrels.grade(query_id, window_ids[i]))
    return " > ".join(f"[{i + 1}]" for i in order)


_NUM_PASSAGES = re.compile(r"I will provide you with (\d+) passages")
_TRANSLATION_DOC = re.compile(r"\ADocuments: (.*)\nTranslate this doc from ", re.DOTALL)


class _Transient(Exception):
    def __init__(self, message: str, status: int | None):
        super().__init__(message)
        self.status = status


class Backend:
    """Uniform completion interface.

    For non-rerank prompts (translations) the identity, reverse and
    qrels_perfect mocks echo the source document, which makes an offline
    "translation" that is simply the input text.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        cache: ResponseCache | None = None,
        ledger: CostLedger | None = None,
        mock: MockScript | None = None,
        qrels: QrelSet | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        backoff_base: float = 1.0,
        timeout: float = 120.0,
    ):
        if cfg.provider is Provider.MOCK:
            if mock is None:
                raise XlrrError("mock provider needs a MockScript")
            if mock.behavior is MockBehavior.QRELS_PERFECT and qrels is None:
                raise XlrrError("qrels_perfect mock needs qrels")
            if mock.behavior is MockBehavior.SCRIPTED:
                # Script order must not depend on thread scheduling.
                cfg = replace(cfg, max_in_flight=1)
        self.cfg = cfg
        self.cache = cache if cache is not None else ResponseCache()
        self.ledger = ledger if ledger is not None else CostLedger()
        self.mock = mock
        self.qrels = qrels
        self._transport = transport
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._timeout = timeout
        self._limiter = RateLimiter(cfg.requests_per_minute, clock=clock, sleep=sleep)
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)
        self._lock = threading.Lock()
        self._script_pos = 0
        self.cache_hits = 0
        self.cache_misses = 0
        self.dispatched = 0

    @property
    def max_in_flight(self) -> int:
        return self.cfg.max_in_flight

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        limit = self.cfg.context_limit - self.cfg.max_completion_tokens
        if req.token_estimate > limit:
            raise BudgetError(
                f"request {req.request_tag!r} needs ~{req.token_estimate} prompt tokens, limit is {limit}"
            )
        key = cache_key(self.cfg, req)
        record = self.cache.get(key)
        if record is not None:
            with self._lock:
                self.cache_hits += 1
            r = record["response"]
            return CompletionResponse(r["text"], r["prompt_tokens"], r["completion_tokens"], cached=True)

        with self._slots:
            text, prompt_tokens, completion_tokens = self._dispatch(req)
        with self._lock:
            self.cache_misses += 1
        response = CompletionResponse(text, prompt_tokens, completion_tokens)
        self.ledger.record(self.cfg, prompt_tokens, completion_tokens)
        self.cache.put(key, {
            "key": key,
            "provider": self.cfg.provider.value,
            "model_name": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "request": {"system_text": req.system_text, "user_text": req.user_text},
            "response": {k: v for k, v in asdict(response).items() if k != "cached"},
        })
        return response

    def _dispatch(self, req: CompletionRequest) -> tuple[str, int, int]:
        if self.cfg.provider is Provider.MOCK:
            with self._lock:
                self.dispatched += 1
            text = self._mock_text(req)
            return text, req.token_estimate, estimate_tokens(text)

        last_status = None
        for attempt in range(self.cfg.max_retries + 1):
            self._limiter.acquire()
            with self._lock:
                self.dispatched += 1
            try:
                return self._call_provider(req)
            except _Transient as exc:
                last_status = exc.status
                if attempt == self.cfg.max_retries:
                    break
                delay = self._backoff_base * 2 ** attempt
                log.warning("%s: %s; retry %d in %.1fs", req.request_tag, exc, attempt + 1, delay)
                self._sleep(delay)
        raise TransportError(
            f"{self.cfg.model_name}: giving up on {req.request_tag!r} after {self.cfg.max_retries + 1} attempts",
            last_status,
        )

    def _mock_text(self, req: CompletionRequest) -> str:
        behavior = self.mock.behavior
        if behavior is MockBehavior.SCRIPTED:
            with self._lock:
                if self._script_pos >= len(self.mock.scripted_responses):
                    raise TransportError(
                        f"scripted mock exhausted after {self._script_pos} responses at {req.request_tag!r}"
                    )
                text = self.mock.scripted_responses[self._script_pos]
                self._script_pos += 1
            return text
        match = _NUM_PASSAGES.search(req.user_text)
        if match is None:
            doc = _TRANSLATION_DOC.search(req.user_text)
            return doc.group(1) if doc else req.user_text
        num = len(req.window_ids) or int(match.group(1))
        if behavior is MockBehavior.IDENTITY:
            order = range(1, num + 1)
        elif behavior is MockBehavior.REVERSE:
            order = range(num, 0, -1)
        else:
            if len(req.window_ids) != num or req.query_id is None:
                raise XlrrError("qrels_perfect mock needs window_ids and query_id on the request")
            return qrels_perfect_response(req.window_ids, self.qrels, req.query_id)
        return " > ".join(f"[{i}]" for i in order)

    def _call_provider(self, req: CompletionRequest) -> tuple[str, int, int]:
        if self.cfg.provider is Provider.OPENAI:
            url, headers, body = self._openai_request(req)
        else:
            url, headers, body = self._anthropic_request(req)
        try:
            with httpx.Client(transport=self._transport, timeout=self._timeout) as client:
                resp = client.post(url, headers=headers, json=body)
        except httpx.TransportError as exc:
            raise _Transient(f"transport failure: {exc}", None) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}", resp.status_code)
        if resp.status_code >= 400:
            raise TransportError(f"{self.cfg.model_name}: HTTP {resp.status_code}: {resp.text[:200]}",
                                 resp.status_code)
        try:
            payload = resp.json()
            if self.cfg.provider is Provider.OPENAI:
                text = payload["choices"][0]["message"]["content"] or ""
                usage = payload.get("usage") or {}
                pt, ct = usage.get("prompt_tokens"), usage.get("completion_tokens")
            else:
                text = "".join(b.get("text", "") for b in payload["content"] if b.get("type") == "text")
                usage = payload.get("usage") or {}
                pt, ct = usage.get("input_tokens"), usage.get("output_tokens")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.cfg.model_name}: malformed response body ({exc})",
                                 resp.status_code) from exc
        if pt is None:
            pt = req.token_estimate
        if ct is None:
            ct = estimate_tokens(text)
        return text, int(pt), int(ct)

    def _openai_request(self, req: CompletionRequest):
        key = os.environ.get(OPENAI_KEY_ENV)
        if not key:
            raise XlrrError(f"set {OPENAI_KEY_ENV} to call {self.cfg.model_name}")
        reasoning = self.cfg.model_name.startswith(("o1", "o3"))
        messages = []
        if req.system_text and not reasoning:
            messages.append({"role": "system", "content": req.system_text})
        user = req.user_text
        if req.system_text and reasoning:
            user = f"{req.system_text}\n{user}"
        messages.append({"role": "user", "content": user})
        body: dict = {"model": self.cfg.model_name, "messages": messages}
        if reasoning:
            # These models accept neither a system role nor temperature.
            body["max_completion_tokens"] = self.cfg.max_completion_tokens
        else:
            body["temperature"] = self.cfg.temperature
            body["max_tokens"] = self.cfg.max_completion_tokens
        if self.cfg.seed is not None:
            body["seed"] = self.cfg.seed
        return self.cfg.endpoint_url, {"Authorization": f"Bearer {key}"}, body

    def _anthropic_request(self, req: CompletionRequest):
        key = os.environ.get(ANTHROPIC_KEY_ENV)
        if not key:
            raise XlrrError(f"set {ANTHROPIC_KEY_ENV} to call {self.cfg.model_name}")
        body: dict = {
            "model": self.cfg.model_name,
            "max_tokens": self.cfg.max_completion_tokens,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": req.user_text}],
        }
        if req.system_text:
            body["system"] = req.system_text
        headers = {"x-api-key": key, "anthropic-version": ANTHROPIC_VERSION}
        return self.cfg.endpoint_url, headers, body


def parse_backend_spec(
    spec: str,
    cache: ResponseCache | None = None,
    qrels: QrelSet | None = None,
    models_file: str | os.PathLike | None = None,
    **overrides,
) -> Backend:
    """Build a backend from a short spec.

    ``mock:identity``, ``mock:reverse``, ``mock:qrels_perfect``,
    ``mock:scripted:<file.json>`` (a JSON list of completions), or
    ``<provider>:<model>`` with provider ``openai`` or ``anthropic``.
    The model's context limit and prices come from the model table.
    """
    kind, _, rest = spec.partition(":")
    if kind == "mock":
        name, _, arg = rest.partition(":")
        aliases = {"identity": "identity_order", "reverse": "reverse_order"}
        try:
            behavior = MockBehavior(aliases.get(name, name))
        except ValueError:
            raise XlrrError(f"unknown mock behavior {name!r}") from None
        responses: tuple[str, ...] = ()
        if behavior is MockBehavior.SCRIPTED:
            if not arg:
                raise XlrrError("scripted mock needs a file: mock:scripted:<path.json>")
            try:
                responses = tuple(json.loads(Path(arg).read_text(encoding="utf-8")))
            except FileNotFoundError:
                raise XlrrError(f"file not found: {arg}") from None
        cfg = BackendConfig(
            Provider.MOCK, f"mock-{behavior.value}", context_limit=overrides.pop("context_limit", None) or 65536,
            **{k: v for k, v in overrides.items() if v is not None},
        )
        return Backend(cfg, cache=cache, mock=MockScript(behavior, responses), qrels=qrels)
    providers = {"openai": Provider.OPENAI, "anthropic": Provider.ANTHROPIC}
    if kind not in providers or not rest:
        raise XlrrError(f"bad backend spec {spec!r}; expected mock:<behavior> or openai|anthropic:<model>")
    table = load_model_table(models_file)
    cfg = config_for_model(rest, table, **overrides)
    if cfg.provider is not providers[kind]:
        cfg = replace(cfg, provider=providers[kind], endpoint_url="")
    return Backend(cfg, cache=cache, qrels=qrels)
