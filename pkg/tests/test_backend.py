import json
import threading

import httpx
import pytest
from hypothesis import given, strategies as st

from xlrr.backend import (
    Backend,
    BackendConfig,
    CostLedger,
    CompletionRequest,
    MockBehavior,
    MockScript,
    Provider,
    RateLimiter,
    ResponseCache,
    cache_key,
    config_for_model,
    load_model_table,
    parse_backend_spec,
    qrels_perfect_response,
)
from xlrr.corpus import QrelSet
from xlrr.errors import BudgetError, TransportError, XlrrError

MOCK_CFG = BackendConfig(Provider.MOCK, "mock", context_limit=65536)


def rerank_req(num, **kw):
    return CompletionRequest(f"I will provide you with {num} passages, each indicated by number identifier [].", **kw)


def mock_backend(behavior, responses=(), **kw):
    return Backend(MOCK_CFG, mock=MockScript(behavior, responses), **kw)


def test_identity_mock():
    assert mock_backend("identity_order").complete(rerank_req(3)).text == "[1] > [2] > [3]"


def test_reverse_mock():
    assert mock_backend("reverse_order").complete(rerank_req(3)).text == "[3] > [2] > [1]"


def test_mock_uses_window_ids_when_given():
    resp = mock_backend("reverse_order").complete(rerank_req(9, window_ids=("a", "b")))
    assert resp.text == "[2] > [1]"


def test_mock_echoes_translation_document():
    req = CompletionRequest("Documents: Habari\nTranslate this doc from Swahili to English.\nOnly return")
    assert mock_backend("identity_order").complete(req).text == "Habari"


def test_second_identical_request_is_cached():
    backend = mock_backend("identity_order")
    first = backend.complete(rerank_req(3, system_text="sys"))
    before = backend.ledger.summary()
    second = backend.complete(rerank_req(3, system_text="sys"))
    assert not first.cached and second.cached
    assert second.text == first.text
    assert backend.ledger.summary() == before
    assert (backend.cache_hits, backend.cache_misses, backend.dispatched) == (1, 1, 1)


def test_disk_cache_survives_new_backend(tmp_path):
    a = mock_backend("scripted", ["[2] > [1]"], cache=ResponseCache(tmp_path))
    a.complete(rerank_req(2))
    files = list(tmp_path.iterdir())
    assert [f.name for f in files] == [cache_key(a.cfg, rerank_req(2))]
    b = mock_backend("scripted", ["something else"], cache=ResponseCache(tmp_path))
    resp = b.complete(rerank_req(2))
    assert resp.cached and resp.text == "[2] > [1]"
    assert b.dispatched == 0


def test_unreadable_cache_record_is_a_miss(tmp_path):
    backend = mock_backend("identity_order", cache=ResponseCache(tmp_path))
    (tmp_path / cache_key(backend.cfg, rerank_req(2))).write_text("{broken")
    assert not backend.complete(rerank_req(2)).cached


def test_scripted_in_order_then_exhausted():
    backend = mock_backend("scripted", ["one", "two"])
    assert backend.complete(CompletionRequest("a")).text == "one"
    assert backend.complete(CompletionRequest("b")).text == "two"
    with pytest.raises(TransportError, match="exhausted"):
        backend.complete(CompletionRequest("c"))


def test_scripted_requires_responses():
    with pytest.raises(XlrrError):
        MockScript(MockBehavior.SCRIPTED, ())


def test_scripted_mock_is_serialized():
    backend = mock_backend("scripted", ["x"])
    assert backend.max_in_flight == 1


def test_mock_transcripts_are_reproducible():
    reqs = [rerank_req(n) for n in (2, 5, 3)] + [CompletionRequest("Documents: x\nTranslate this doc from ")]
    a = [mock_backend("reverse_order").complete(r).text for r in reqs]
    b = [mock_backend("reverse_order").complete(r).text for r in reqs]
    assert a == b


def test_over_budget_request():
    cfg = BackendConfig(Provider.MOCK, "mock", context_limit=100, max_completion_tokens=50)
    backend = Backend(cfg, mock=MockScript("identity_order"))
    with pytest.raises(BudgetError):
        backend.complete(CompletionRequest("x" * 201))
    assert backend.dispatched == 0


def test_empty_user_text():
    with pytest.raises(XlrrError):
        CompletionRequest("")


def test_negative_temperature():
    with pytest.raises(XlrrError):
        BackendConfig(Provider.MOCK, "m", temperature=-0.1)


def test_cache_key_properties():
    req = CompletionRequest("rank these", system_text="sys")
    assert cache_key(MOCK_CFG, req) == cache_key(MOCK_CFG, CompletionRequest("rank these", system_text="sys"))
    other_model = BackendConfig(Provider.MOCK, "mock-2", context_limit=65536)
    assert cache_key(MOCK_CFG, req) != cache_key(other_model, req)
    assert cache_key(MOCK_CFG, req) != cache_key(MOCK_CFG, CompletionRequest("rank  these", system_text="sys"))
    assert cache_key(MOCK_CFG, req) != cache_key(MOCK_CFG, CompletionRequest("rank these"))
    warm = BackendConfig(Provider.MOCK, "mock", temperature=0.5)
    assert cache_key(MOCK_CFG, req) != cache_key(warm, req)


def test_cache_key_ignores_request_tag_and_window_ids():
    a = CompletionRequest("u", request_tag="q1/0", window_ids=("d1",), query_id="q1")
    assert cache_key(MOCK_CFG, a) == cache_key(MOCK_CFG, CompletionRequest("u"))


def test_cache_key_is_stable_hex():
    key = cache_key(MOCK_CFG, CompletionRequest("u"))
    assert len(key) == 64 and int(key, 16) >= 0


@given(st.text(min_size=1), st.text(min_size=1))
def test_cache_key_separates_distinct_user_text(a, b):
    if a != b:
        assert cache_key(MOCK_CFG, CompletionRequest(a)) != cache_key(MOCK_CFG, CompletionRequest(b))


def qrels_for(grades):
    return QrelSet({("q", f"d{i}"): g for i, g in enumerate(grades)})


@pytest.mark.parametrize(
    "grades, expected",
    [([0, 1, 0], "[2] > [1] > [3]"), ([0, 0, 0], "[1] > [2] > [3]"), ([2, 1, 2], "[1] > [3] > [2]")],
)
def test_qrels_perfect(grades, expected):
    ids = [f"d{i}" for i in range(len(grades))]
    assert qrels_perfect_response(ids, qrels_for(grades), "q") == expected


def test_qrels_perfect_unjudged_counts_as_zero():
    assert qrels_perfect_response(["x", "d1"], qrels_for([0, 1]), "q") == "[2] > [1]"


def test_qrels_perfect_backend():
    backend = mock_backend("qrels_perfect", qrels=qrels_for([0, 1, 0]))
    req = rerank_req(3, window_ids=("d0", "d1", "d2"), query_id="q")
    assert backend.complete(req).text == "[2] > [1] > [3]"


def test_qrels_perfect_requires_qrels():
    with pytest.raises(XlrrError):
        mock_backend("qrels_perfect")


def test_ledger_conservation_under_threads():
    ledger = CostLedger()
    cfg = BackendConfig(Provider.MOCK, "m", price_per_1k_prompt=0.0015, price_per_1k_completion=0.002)
    other = BackendConfig(Provider.MOCK, "n", price_per_1k_prompt=0.003, price_per_1k_completion=0.015)

    def work(seed):
        for i in range(200):
            ledger.record(cfg if (seed + i) % 2 else other, 37 * i + seed, 3 * i + 1)

    threads = [threading.Thread(target=work, args=(s,)) for s in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    recomputed = sum(u.recomputed_cost() for u in ledger.models.values())
    assert ledger.total_cost == pytest.approx(recomputed, abs=1e-9)
    assert sum(u.request_count for u in ledger.models.values()) == 1600


def test_ledger_known_cost():
    ledger = CostLedger()
    ledger.record(BackendConfig(Provider.MOCK, "m", price_per_1k_prompt=1.0, price_per_1k_completion=2.0), 500, 250)
    # 500/1000 * 1.0 + 250/1000 * 2.0
    assert ledger.total_cost == pytest.approx(1.0)
    assert ledger.summary()["m"]["request_count"] == 1


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds


def test_rate_limiter_window():
    clock = FakeClock()
    limiter = RateLimiter(3, clock=clock, sleep=clock.sleep)
    stamps = []
    for _ in range(7):
        limiter.acquire()
        stamps.append(clock.now)
    assert stamps == [0, 0, 0, 60, 60, 60, 120]
    for i in range(len(stamps)):
        in_window = [s for s in stamps if stamps[i] <= s < stamps[i] + 60]
        assert len(in_window) <= 3


def test_rate_limiter_disabled():
    clock = FakeClock()
    limiter = RateLimiter(0, clock=clock, sleep=clock.sleep)
    for _ in range(100):
        limiter.acquire()
    assert clock.sleeps == []


def openai_ok(text="[1] > [2]", usage=True):
    body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if usage:
        body["usage"] = {"prompt_tokens": 11, "completion_tokens": 4}
    return httpx.Response(200, json=body)


def scripted_transport(responses, seen):
    responses = list(responses)

    def handler(request):
        seen.append(request)
        item = responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    return httpx.MockTransport(handler)


def remote(provider, model, responses, seen, **cfg_kw):
    cfg = BackendConfig(provider, model, max_retries=cfg_kw.pop("max_retries", 3), **cfg_kw)
    clock = FakeClock()
    backend = Backend(cfg, transport=scripted_transport(responses, seen), sleep=clock.sleep, clock=clock)
    return backend, clock


@pytest.fixture
def keys(monkeypatch):
    monkeypatch.setenv("XLRR_OPENAI_KEY", "sk-test")
    monkeypatch.setenv("XLRR_ANTHROPIC_KEY", "ak-test")


def test_openai_request_shape(keys):
    seen = []
    backend, _ = remote(Provider.OPENAI, "gpt-3.5-turbo", [openai_ok()], seen)
    resp = backend.complete(CompletionRequest("user", system_text="system"))
    assert resp.text == "[1] > [2]" and (resp.prompt_tokens, resp.completion_tokens) == (11, 4)
    req = seen[0]
    assert str(req.url) == "https://api.openai.com/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer sk-test"
    body = json.loads(req.content)
    assert body["messages"] == [{"role": "system", "content": "system"}, {"role": "user", "content": "user"}]
    assert body["temperature"] == 0 and body["seed"] == 0
    assert backend.ledger.summary()["gpt-3.5-turbo"]["prompt_tokens"] == 11


def test_reasoning_model_request_shape(keys):
    seen = []
    backend, _ = remote(Provider.OPENAI, "o1-mini", [openai_ok()], seen, max_completion_tokens=9000, context_limit=65536)
    backend.complete(CompletionRequest("user", system_text="system"))
    body = json.loads(seen[0].content)
    assert body["messages"] == [{"role": "user", "content": "system\nuser"}]
    assert body["max_completion_tokens"] == 9000
    assert "temperature" not in body


def test_anthropic_request_shape(keys):
    seen = []
    reply = httpx.Response(
        200, json={"content": [{"type": "text", "text": "[2] > [1]"}], "usage": {"input_tokens": 20, "output_tokens": 5}}
    )
    backend, _ = remote(Provider.ANTHROPIC, "claude-3-5-sonnet-20240620", [reply], seen)
    resp = backend.complete(CompletionRequest("user", system_text="system"))
    assert resp.text == "[2] > [1]" and resp.prompt_tokens == 20
    req = seen[0]
    assert req.headers["x-api-key"] == "ak-test"
    assert req.headers["anthropic-version"] == "2023-06-01"
    body = json.loads(req.content)
    assert body["system"] == "system"
    assert body["messages"] == [{"role": "user", "content": "user"}]


def test_missing_usage_falls_back_to_estimate(keys):
    seen = []
    backend, _ = remote(Provider.OPENAI, "gpt-4o-mini", [openai_ok("[1] > [2]", usage=False)], seen)
    resp = backend.complete(CompletionRequest("abcdefgh"))
    assert (resp.prompt_tokens, resp.completion_tokens) == (2, 3)


def test_retry_on_429_and_5xx_with_backoff(keys):
    seen = []
    backend, clock = remote(
        Provider.OPENAI, "gpt-4o-mini", [httpx.Response(429), httpx.Response(503), openai_ok()], seen
    )
    assert backend.complete(CompletionRequest("u")).text == "[1] > [2]"
    assert len(seen) == 3
    assert clock.sleeps == [1.0, 2.0]


def test_retry_on_transport_error(keys):
    seen = []
    backend, clock = remote(Provider.OPENAI, "gpt-4o-mini", [httpx.ConnectError("down"), openai_ok()], seen)
    assert backend.complete(CompletionRequest("u")).text == "[1] > [2]"
    assert clock.sleeps == [1.0]


def test_exhausted_retries_carry_last_status(keys):
    seen = []
    backend, clock = remote(
        Provider.OPENAI, "gpt-4o-mini", [httpx.Response(500), httpx.Response(502), httpx.Response(503)], seen,
        max_retries=2,
    )
    with pytest.raises(TransportError) as info:
        backend.complete(CompletionRequest("u"))
    assert info.value.status == 503
    assert len(seen) == 3
    assert clock.sleeps == [1.0, 2.0]
    assert backend.ledger.summary() == {}


def test_client_error_is_not_retried(keys):
    seen = []
    backend, _ = remote(Provider.OPENAI, "gpt-4o-mini", [httpx.Response(401, text="bad key")], seen)
    with pytest.raises(TransportError) as info:
        backend.complete(CompletionRequest("u"))
    assert info.value.status == 401 and len(seen) == 1


def test_malformed_body(keys):
    seen = []
    backend, _ = remote(Provider.OPENAI, "gpt-4o-mini", [httpx.Response(200, json={"nope": 1})], seen)
    with pytest.raises(TransportError, match="malformed"):
        backend.complete(CompletionRequest("u"))


def test_missing_api_key(monkeypatch):
    monkeypatch.delenv("XLRR_OPENAI_KEY", raising=False)
    backend, _ = remote(Provider.OPENAI, "gpt-4o-mini", [], [])
    with pytest.raises(XlrrError, match="XLRR_OPENAI_KEY"):
        backend.complete(CompletionRequest("u"))


def test_rate_limit_applies_to_remote_calls(keys):
    seen = []
    backend, clock = remote(Provider.OPENAI, "gpt-4o-mini", [openai_ok()] * 3, seen, requests_per_minute=2)
    for i in range(3):
        backend.complete(CompletionRequest(f"u{i}"))
    assert clock.sleeps == [60.0]


@pytest.mark.parametrize(
    "model, context",
    [("gpt-3.5-turbo", 4096), ("gpt-4o-mini", 16384), ("o1-mini", 65536), ("claude-3-5-sonnet", 8192)],
)
def test_model_context_limits(model, context):
    assert config_for_model(model).context_limit == context


def test_preset_prefix_match():
    cfg = config_for_model("gpt-4o-mini-2024-07-18")
    assert cfg.context_limit == 16384 and cfg.provider is Provider.OPENAI


def test_editable_price_table(tmp_path):
    table = load_model_table()
    table["gpt-4o-mini"]["price_per_1k_prompt"] = 9.0
    path = tmp_path / "models.json"
    path.write_text(json.dumps(table))
    backend = parse_backend_spec("openai:gpt-4o-mini", models_file=path)
    assert backend.cfg.price_per_1k_prompt == 9.0


def test_parse_backend_spec():
    assert parse_backend_spec("mock:identity").mock.behavior is MockBehavior.IDENTITY
    assert parse_backend_spec("anthropic:claude-3-5-sonnet").cfg.provider is Provider.ANTHROPIC
    with pytest.raises(XlrrError):
        parse_backend_spec("mock:psychic")
    with pytest.raises(XlrrError):
        parse_backend_spec("gemini:pro")
    with pytest.raises(XlrrError):
        parse_backend_spec("openai:unknown-model")


def test_parse_scripted_spec(tmp_path):
    path = tmp_path / "s.json"
    path.write_text('["[1] > [2]"]')
    backend = parse_backend_spec(f"mock:scripted:{path}")
    assert backend.complete(rerank_req(2)).text == "[1] > [2]"
