"""Client for OpenAI-style completion endpoints with logprob scoring.

The same pipeline that drives in-process tabular models can point at a real
instruction-tuned model through this client. Requests are plain JSON-over-HTTP
completion calls; responses are cached on disk keyed by request hash, and
transient failures retry with exponential backoff. The API key is referenced
by environment variable name only and never lands in any persisted artifact.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import requests

from .errors import AuthFailure, ProtocolError, RateLimited, Timeout, UnsupportedEndpoint


@dataclass(frozen=True)
class RemoteEndpoint:
    """Connection settings; the key itself is read from the named env var."""

    base_url: str
    model: str
    api_key_env: str = "DELTADISTILL_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0
    in_flight: int = 4


@dataclass(frozen=True)
class ScoredCompletion:
    """Completion text with the endpoint's own token segmentation and logprobs."""

    text: str
    tokens: tuple[str, ...] = ()
    logprobs: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.tokens) != len(self.logprobs):
            raise ProtocolError(
                f"token/logprob length mismatch: {len(self.tokens)} tokens, {len(self.logprobs)} logprobs"
            )


@dataclass(frozen=True)
class TransportResponse:
    status: int
    body: str


Transport = Callable[[str, dict, dict, float], TransportResponse]


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> TransportResponse:
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.Timeout as exc:
        raise Timeout(f"request to {url} timed out after {timeout}s") from exc
    except requests.RequestException as exc:
        raise ProtocolError(f"transport failure: {exc}") from exc
    return TransportResponse(resp.status_code, resp.text)


class ResponseCache:
    """Content-addressed JSON files; safe for concurrent readers, writes are atomic."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, key: str, payload: dict) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
        os.replace(tmp, path)


def request_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


class CompletionClient:
    """Completion calls with retry, backoff, caching, and logprob parsing."""

    def __init__(
        self,
        endpoint: RemoteEndpoint,
        transport: Transport | None = None,
        cache: ResponseCache | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter: Callable[[], float] = random.random,
    ):
        self.endpoint = endpoint
        self.transport = transport or _requests_transport
        self.cache = cache
        self._sleep = sleep
        self._jitter = jitter

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.endpoint.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _request(self, payload: dict) -> dict:
        key = request_key(payload)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit

        attempt = 0
        while True:
            try:
                response = self.transport(self.endpoint.base_url, payload, self._headers(), self.endpoint.timeout)
                body = self._check(response)
            except (Timeout, RateLimited):
                if attempt >= self.endpoint.max_retries:
                    raise
                delay = self.endpoint.backoff_base * (2**attempt) * (1.0 + 0.1 * self._jitter())
                self._sleep(delay)
                attempt += 1
                continue
            if self.cache is not None:
                self.cache.put(key, body)
            return body

    @staticmethod
    def _check(response: TransportResponse) -> dict:
        if response.status in (401, 403):
            raise AuthFailure(f"endpoint rejected credentials (HTTP {response.status})")
        if response.status == 429:
            raise RateLimited("endpoint throttled the request (HTTP 429)")
        if response.status != 200:
            raise ProtocolError(f"HTTP {response.status}: {response.body[:200]}")
        try:
            parsed = json.loads(response.body)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"invalid JSON response: {response.body[:200]}") from exc
        if not isinstance(parsed, dict):
            raise ProtocolError(f"unexpected response shape: {response.body[:200]}")
        return parsed

    def generate(self, prompt: str, max_tokens: int = 256, temperature: float = 1.0) -> ScoredCompletion:
        """Request a completion; returns logprobs when the endpoint provides them."""
        if max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
        payload = {
            "model": self.endpoint.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": temperature,
            "logprobs": 0,
            "echo": False,
        }
        body = self._request(payload)
        choice = self._first_choice(body)
        text = choice.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"choice has no text field: {json.dumps(choice)[:200]}")
        lp = choice.get("logprobs")
        if not lp:
            return ScoredCompletion(text=text)
        tokens, logprobs = self._token_logprobs(lp)
        return ScoredCompletion(text=text, tokens=tokens, logprobs=logprobs)

    def score(self, prompt: str, response: str) -> float:
        """Perplexity of ``response`` given ``prompt`` from echoed logprobs.

        Prompt tokens are excluded from the per-token mean.
        """
        payload = {
            "model": self.endpoint.model,
            "prompt": prompt + response,
            "max_tokens": 0,
            "temperature": 0.0,
            "logprobs": 0,
            "echo": True,
        }
        body = self._request(payload)
        choice = self._first_choice(body)
        lp = choice.get("logprobs")
        if not lp:
            raise UnsupportedEndpoint("endpoint did not return logprobs for an echoed continuation")
        tokens, logprobs, offsets = self._token_logprobs(lp, with_offsets=True)
        if offsets is not None:
            response_lps = [l for l, off in zip(logprobs, offsets) if off >= len(prompt)]
        else:
            response_lps = list(logprobs)
        if not response_lps:
            raise ProtocolError("no response tokens found in echoed logprobs")
        return float(math.exp(-sum(response_lps) / len(response_lps)))

    def generate_many(
        self, prompts: Sequence[str], max_tokens: int = 256, temperature: float = 1.0
    ) -> list[ScoredCompletion]:
        """Concurrent completions bounded by the endpoint's in_flight limit, in input order."""
        with ThreadPoolExecutor(max_workers=self.endpoint.in_flight) as pool:
            return list(pool.map(lambda p: self.generate(p, max_tokens, temperature), prompts))

    @staticmethod
    def _first_choice(body: dict) -> dict:
        choices = body.get("choices")
        if not isinstance(choices, list) or not choices or not isinstance(choices[0], dict):
            raise ProtocolError(f"response has no choices: {json.dumps(body)[:200]}")
        return choices[0]

    @staticmethod
    def _token_logprobs(lp: dict, with_offsets: bool = False):
        tokens = lp.get("tokens")
        logprobs = lp.get("token_logprobs")
        if not isinstance(tokens, list) or not isinstance(logprobs, list):
            raise ProtocolError(f"malformed logprobs block: {json.dumps(lp)[:200]}")
        if len(tokens) != len(logprobs):
            raise ProtocolError(
                f"token/logprob length mismatch: {len(tokens)} tokens, {len(logprobs)} logprobs"
            )
        # The first echoed token's logprob may legitimately be null.
        pairs = [(t, l) for t, l in zip(tokens, logprobs)]
        offsets = lp.get("text_offset")
        if offsets is not None and (not isinstance(offsets, list) or len(offsets) != len(tokens)):
            raise ProtocolError("text_offset length does not match tokens")
        if not with_offsets:
            clean = [(t, l) for t, l in pairs if l is not None]
            return tuple(t for t, _ in clean), tuple(float(l) for _, l in clean)
        if offsets is not None:
            keep = [(t, l, o) for (t, l), o in zip(pairs, offsets) if l is not None]
            return (
                tuple(t for t, _, _ in keep),
                tuple(float(l) for _, l, _ in keep),
                tuple(int(o) for _, _, o in keep),
            )
        clean = [(t, l) for t, l in pairs if l is not None]
        return tuple(t for t, _ in clean), tuple(float(l) for _, l in clean), None


def remote_generate(
    ep: RemoteEndpoint,
    prompt: str,
    max_tokens: int = 256,
    temperature: float = 1.0,
    client: CompletionClient | None = None,
) -> ScoredCompletion:
    return (client or CompletionClient(ep)).generate(prompt, max_tokens, temperature)


def remote_perplexity(
    ep: RemoteEndpoint,
    prompt: str,
    response: str,
    client: CompletionClient | None = None,
) -> float:
    return (client or CompletionClient(ep)).score(prompt, response)
