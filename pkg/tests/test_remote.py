from __future__ import annotations

import json
import math

import pytest

from deltadistill.errors import AuthFailure, ProtocolError, RateLimited, Timeout, UnsupportedEndpoint
from deltadistill.remote import (
    CompletionClient,
    RemoteEndpoint,
    ResponseCache,
    ScoredCompletion,
    TransportResponse,
    remote_generate,
    remote_perplexity,
    request_key,
)

ENDPOINT = RemoteEndpoint(base_url="http://test.local/v1/completions", model="m", backoff_base=0.25)


class ScriptedTransport:
    """Replays a fixed sequence of responses (or exceptions) and logs calls."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def __call__(self, url, payload, headers, timeout):
        self.calls.append({"url": url, "payload": payload, "headers": headers})
        step = self.script.pop(0) if len(self.script) > 1 else self.script[0]
        if isinstance(step, Exception):
            raise step
        status, body = step
        return TransportResponse(status, body if isinstance(body, str) else json.dumps(body))


def completion_body(text, tokens=None, logprobs=None, offsets=None):
    choice = {"text": text}
    if tokens is not None:
        choice["logprobs"] = {"tokens": tokens, "token_logprobs": logprobs}
        if offsets is not None:
            choice["logprobs"]["text_offset"] = offsets
    return {"choices": [choice]}


def make_client(script, sleeps=None):
    transport = ScriptedTransport(script)
    client = CompletionClient(
        ENDPOINT,
        transport=transport,
        sleep=(sleeps.append if sleeps is not None else lambda s: None),
        jitter=lambda: 0.0,
    )
    return client, transport


def test_generate_parses_fixture_body():
    client, _ = make_client([(200, completion_body("1. Q: hello"))])
    result = client.generate("prompt", max_tokens=32)
    assert result.text == "1. Q: hello"
    assert result.tokens == ()


def test_generate_returns_logprobs_when_present():
    client, _ = make_client([(200, completion_body("hi", tokens=["h", "i"], logprobs=[-0.5, -0.25]))])
    result = client.generate("prompt")
    assert result.tokens == ("h", "i")
    assert result.logprobs == (-0.5, -0.25)


def test_retry_after_rate_limit_twice():
    sleeps = []
    client, transport = make_client(
        [(429, "slow down"), (429, "slow down"), (200, completion_body("ok"))], sleeps=sleeps
    )
    result = client.generate("prompt")
    assert result.text == "ok"
    assert len(transport.calls) == 3
    # exponential backoff: base, then base * 2
    assert sleeps == [0.25, 0.5]


def test_retry_after_timeout():
    client, transport = make_client([Timeout("slow"), (200, completion_body("ok"))])
    assert client.generate("prompt").text == "ok"
    assert len(transport.calls) == 2


def test_rate_limit_exhausts_retries():
    client, transport = make_client([(429, "nope")])
    with pytest.raises(RateLimited):
        client.generate("prompt")
    assert len(transport.calls) == ENDPOINT.max_retries + 1


def test_auth_failure_not_retried():
    client, transport = make_client([(401, "bad key")])
    with pytest.raises(AuthFailure):
        client.generate("prompt")
    assert len(transport.calls) == 1


def test_server_error_raises_protocol_error():
    client, _ = make_client([(500, "boom")])
    with pytest.raises(ProtocolError, match="boom"):
        client.generate("prompt")


def test_malformed_json_raises_protocol_error():
    client, _ = make_client([(200, "{not json")])
    with pytest.raises(ProtocolError):
        client.generate("prompt")


def test_missing_choices_raises_protocol_error():
    client, _ = make_client([(200, {"object": "nothing"})])
    with pytest.raises(ProtocolError):
        client.generate("prompt")


def test_mismatched_logprob_lengths_raise_protocol_error():
    body = completion_body("x", tokens=["a", "b"], logprobs=[-0.1])
    client, _ = make_client([(200, body)])
    with pytest.raises(ProtocolError, match="mismatch"):
        client.generate("prompt")


def test_generate_validates_max_tokens():
    client, _ = make_client([(200, completion_body("x"))])
    with pytest.raises(ValueError):
        client.generate("prompt", max_tokens=0)


def test_scored_completion_invariant():
    with pytest.raises(ProtocolError):
        ScoredCompletion(text="x", tokens=("a",), logprobs=())


def test_score_all_zero_logprobs_gives_ppl_one():
    body = completion_body("", tokens=["a", "b"], logprobs=[0.0, 0.0], offsets=[0, 1])
    client, _ = make_client([(200, body)])
    assert client.score("", "ab") == pytest.approx(1.0, abs=1e-15)


def test_score_uniform_logprobs_closed_form():
    lp = -math.log(8)
    body = completion_body("", tokens=["a", "b", "c"], logprobs=[lp, lp, lp], offsets=[0, 1, 2])
    client, _ = make_client([(200, body)])
    assert client.score("", "abc") == pytest.approx(8.0, rel=1e-12)


def test_score_paper_fixture_logprobs():
    body = completion_body("", tokens=["x", "y", "z"], logprobs=[-0.1, -0.3, -0.2], offsets=[0, 1, 2])
    client, _ = make_client([(200, body)])
    assert client.score("", "xyz") == pytest.approx(math.exp(0.2), abs=1e-12)


def test_score_excludes_prompt_tokens_by_offset():
    # prompt "ab" occupies offsets 0-1; only the response tokens count
    body = completion_body(
        "", tokens=["ab", "c", "d"], logprobs=[None, -0.2, -0.4], offsets=[0, 2, 3]
    )
    client, _ = make_client([(200, body)])
    assert client.score("ab", "cd") == pytest.approx(math.exp(0.3), rel=1e-12)


def test_score_without_logprobs_unsupported():
    client, _ = make_client([(200, completion_body("x"))])
    with pytest.raises(UnsupportedEndpoint):
        client.score("p", "r")


def test_module_level_wrappers():
    client, _ = make_client([(200, completion_body("hello"))])
    assert remote_generate(ENDPOINT, "p", client=client).text == "hello"
    body = completion_body("", tokens=["r"], logprobs=[-0.1], offsets=[0])
    client2, _ = make_client([(200, body)])
    assert remote_perplexity(ENDPOINT, "", "r", client=client2) == pytest.approx(math.exp(0.1), rel=1e-12)


def test_cache_prevents_repeat_requests(tmp_path):
    transport = ScriptedTransport([(200, completion_body("cached"))])
    cache = ResponseCache(tmp_path / "cache")
    client = CompletionClient(ENDPOINT, transport=transport, cache=cache, sleep=lambda s: None)
    first = client.generate("same prompt", max_tokens=8, temperature=0.5)
    second = client.generate("same prompt", max_tokens=8, temperature=0.5)
    assert first == second
    assert len(transport.calls) == 1
    # different request parameters miss the cache
    client.generate("same prompt", max_tokens=9, temperature=0.5)
    assert len(transport.calls) == 2


def test_request_key_is_stable():
    payload = {"model": "m", "prompt": "p", "max_tokens": 4}
    assert request_key(payload) == request_key(dict(reversed(list(payload.items()))))


def test_generate_many_preserves_order():
    bodies = completion_body("reply")
    transport = ScriptedTransport([(200, bodies)])
    client = CompletionClient(ENDPOINT, transport=transport, sleep=lambda s: None)
    results = client.generate_many(["a", "b", "c"], max_tokens=4)
    assert [r.text for r in results] == ["reply", "reply", "reply"]
    assert len(transport.calls) == 3


def test_api_key_read_from_env_not_persisted(tmp_path, monkeypatch):
    secret = "sk-super-secret-value"
    monkeypatch.setenv(ENDPOINT.api_key_env, secret)
    transport = ScriptedTransport([(200, completion_body("ok"))])
    cache = ResponseCache(tmp_path / "cache")
    client = CompletionClient(ENDPOINT, transport=transport, cache=cache, sleep=lambda s: None)
    client.generate("p")
    assert transport.calls[0]["headers"]["Authorization"] == f"Bearer {secret}"
    for path in (tmp_path / "cache").rglob("*"):
        assert secret not in path.read_text()
    # endpoint repr carries the env var name, never the key
    assert secret not in repr(ENDPOINT)


def test_no_auth_header_without_key(monkeypatch):
    monkeypatch.delenv(ENDPOINT.api_key_env, raising=False)
    transport = ScriptedTransport([(200, completion_body("ok"))])
    client = CompletionClient(ENDPOINT, transport=transport, sleep=lambda s: None)
    client.generate("p")
    assert "Authorization" not in transport.calls[0]["headers"]


def test_remote_perplexity_agrees_with_local_scoring():
    # an endpoint echoing a local model's per-token logprobs must reproduce
    # the local perplexity: exp(-mean), natural log, response tokens only
    import fixtures
    from deltadistill.corpus import tokenize
    from deltadistill.lm import step_log_probs
    from deltadistill.scoring import perplexity

    fx = fixtures.make_fixture()
    prompt = tokenize("tin gives", fx.vocab)
    response = tokenize("oak", fx.vocab)
    lps = step_log_probs(fx.finetuned, prompt, response)

    prompt_text, response_text = "tin gives", " oak"
    body = completion_body(
        "",
        tokens=["tin", " gives", " oak"],
        logprobs=[None, -1.0, float(lps[0])],
        offsets=[0, 3, 9],
    )
    client, _ = make_client([(200, body)])
    assert client.score(prompt_text, response_text) == pytest.approx(
        perplexity(fx.finetuned, prompt, response), rel=1e-12
    )
