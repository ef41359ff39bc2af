"""Client for OpenAI-compatible ``/v1/completions`` endpoints with logprobs."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from typing import Callable, Sequence

import httpx

from ..errors import BackendError
from ..gentree import TokenRecord
from .base import Continuation, FinishReason, GenParams

log = logging.getLogger(__name__)

_TOKEN_ID = re.compile(r"^token_id:(\d+)$")
_FINISH = {"stop": FinishReason.END_TOKEN, "eos": FinishReason.END_TOKEN,
           "length": FinishReason.LENGTH}
_RETRY_STATUS = {408, 429, 500, 502, 503, 504}


class HttpBackend:
    """Inference-only backend; text is treated opaquely.

    Token ids come from ``token_id:N`` strings when the server returns them
    (vLLM's ``return_tokens_as_token_ids``); otherwise each distinct token
    string is interned to a local id.  Leaves are graded by ``grader(prompt,
    completion_text)``.
    """

    def __init__(self, base_url: str, model: str, *, api_key_env: str = "OPENAI_API_KEY",
                 timeout: float = 120.0, grader: Callable[[object, str], bool] | None = None,
                 max_attempts: int = 3, backoff: float = 0.5, extra_body: dict | None = None,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.url = base_url.rstrip("/") + "/completions"
        self.model = model
        self.grader = grader
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.extra_body = dict(extra_body or {})
        self.sleep = sleep
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=timeout)
        self.headers = headers
        self.vocab: dict[str, int] = {}

    def _token_id(self, text: str) -> int:
        m = _TOKEN_ID.match(text)
        if m:
            return int(m.group(1))
        return self.vocab.setdefault(text, len(self.vocab))

    def _post(self, body: dict) -> dict:
        last: BackendError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.url, json=body, headers=self.headers)
            except httpx.TimeoutException as exc:
                last = BackendError("Timeout", str(exc))
                continue
            except httpx.TransportError as exc:
                last = BackendError("Transport", str(exc))
                continue
            if resp.status_code in _RETRY_STATUS:
                last = BackendError("HTTPStatus", f"{resp.status_code}")
                log.warning("completion request failed with %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError("HTTPStatus", f"{resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except (json.JSONDecodeError, ValueError) as exc:
                raise BackendError("MalformedResponse", str(exc)) from None
        raise last

    def parse(self, payload: dict) -> Continuation:
        try:
            choice = payload["choices"][0]
        except (KeyError, IndexError, TypeError):
            raise BackendError("MalformedResponse", "no choices in response") from None
        lp = choice.get("logprobs")
        if not lp or lp.get("tokens") is None or lp.get("token_logprobs") is None:
            raise BackendError("MissingLogprobs", "response carries no token logprobs")
        toks, lps = lp["tokens"], lp["token_logprobs"]
        if len(toks) != len(lps):
            raise BackendError("MalformedResponse", "tokens and logprobs differ in length")
        out = []
        for text, logprob in zip(toks, lps):
            if logprob is None:
                raise BackendError("MissingLogprobs", f"no logprob for token {text!r}")
            s = max(0.0, -float(logprob))
            if s == float("inf") or s != s:
                raise BackendError("MalformedResponse", f"invalid logprob {logprob!r}")
            out.append(TokenRecord(self._token_id(text), s, text))
        reason = _FINISH.get(choice.get("finish_reason"))
        if reason is None:
            raise BackendError("MalformedResponse", f"unknown finish_reason {choice.get('finish_reason')!r}")
        return Continuation(out, True, reason)

    def http_complete(self, prompt_text: str, prefix_text: str, params: GenParams,
                      max_tokens: int | None = None) -> Continuation:
        body = {
            "model": self.model, "prompt": prompt_text + prefix_text,
            "temperature": params.temperature, "top_p": params.top_p,
            "max_tokens": max_tokens or params.max_new_tokens, "logprobs": 1, "seed": params.seed,
            **self.extra_body,
        }
        return self.parse(self._post(body))

    def sample_continuation(self, prompt, prefix: Sequence[TokenRecord], params: GenParams,
                            limit: int | None = None) -> Continuation:
        remaining = params.max_new_tokens - len(prefix)
        if limit is not None:
            remaining = min(remaining, limit)
        if remaining < 1:
            return Continuation([], True, FinishReason.LENGTH)
        prefix_text = "".join(t.text or "" for t in prefix)
        cont = self.http_complete(str(prompt), prefix_text, params, max_tokens=remaining)
        if limit is not None and cont.finish_reason is FinishReason.LENGTH \
                and len(prefix) + len(cont.tokens) < params.max_new_tokens:
            cont.terminal, cont.finish_reason = False, None
        return cont

    def grade(self, prompt, tokens: Sequence[TokenRecord]) -> bool:
        if self.grader is None:
            return False
        return bool(self.grader(prompt, "".join(t.text or "" for t in tokens)))
