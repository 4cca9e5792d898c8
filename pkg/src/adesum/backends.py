"""HTTP clients for served model endpoints, plus offline replay doubles.

Four wire contracts, all JSON over POST:
  completion   {"prompt": str}                -> {"text": str}
  embeddings   {"texts": [str]}               -> {"vectors": [[float]]}
  summarizer   {"drug": str, "groups": dict}  -> {"summary": str}
  scoring      {"prompt": str, "completion": str} -> {"logprob": float}

Transport problems and 5xx responses surface as retryable
TransportError after the configured attempts; malformed bodies raise
ModelOutputError carrying the raw payload.  Replay doubles satisfy the
same protocols from canned data so every pipeline stage runs offline.
"""

from __future__ import annotations

import json
from urllib.parse import urlparse

import httpx

from .errors import ModelOutputError, TransportError
from .extraction import (
    ExtractionRecord,
    PromptTemplate,
    parse_model_output,
    render_prompt,
)

DEFAULT_TIMEOUT = 10.0
DEFAULT_RETRIES = 2


class _JsonEndpoint:
    """One POST endpoint with bearer auth and bounded retries."""

    def __init__(self, url: str, token=None, timeout: float = DEFAULT_TIMEOUT,
                 max_retries: int = DEFAULT_RETRIES):
        self.url = url
        self.timeout = timeout
        self.max_retries = max_retries
        headers = {"content-type": "application/json"}
        if token:
            headers["authorization"] = f"Bearer {token}"
        self._client = httpx.Client(headers=headers, timeout=timeout)

    def post(self, payload: dict) -> dict:
        last_error = None
        for _ in range(self.max_retries + 1):
            try:
                response = self._client.post(self.url, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = RuntimeError(
                    f"{self.url} answered {response.status_code}"
                )
                continue
            if response.status_code >= 400:
                raise ModelOutputError(
                    f"{self.url} rejected the request ({response.status_code})",
                    raw_output=response.text,
                )
            try:
                body = response.json()
            except json.JSONDecodeError:
                raise ModelOutputError(
                    f"{self.url} returned a non-JSON body", raw_output=response.text
                )
            if not isinstance(body, dict):
                raise ModelOutputError(
                    f"{self.url} returned a non-object body", raw_output=response.text
                )
            return body
        raise TransportError(f"{self.url} unreachable after retries: {last_error}")

    def close(self):
        self._client.close()


def _host_tag(url: str) -> str:
    return urlparse(url).netloc or url


class HttpCompletionBackend:
    """Raw text completion endpoint."""

    def __init__(self, url: str, **kw):
        self._endpoint = _JsonEndpoint(url, **kw)
        self.backend_id = f"llm@{_host_tag(url)}"

    def complete(self, prompt: str) -> str:
        body = self._endpoint.post({"prompt": prompt})
        if "text" not in body:
            raise ModelOutputError(
                "completion response lacks 'text'", raw_output=json.dumps(body)
            )
        return str(body["text"])


class LlmExtractionBackend:
    """Extraction through a completion endpoint and a prompt template."""

    def __init__(self, completion_backend, template: PromptTemplate):
        self.completion = completion_backend
        self.template = template
        self.backend_id = completion_backend.backend_id

    def run(self, post) -> ExtractionRecord:
        raw = self.completion.complete(render_prompt(post, self.template))
        items, warnings_ = parse_model_output(raw, self.template.output_schema_version)
        return ExtractionRecord(
            post_id=post.id,
            items=tuple(items),
            backend_id=self.backend_id,
            raw_model_output=raw,
            warnings=tuple(warnings_),
        )


class HttpEmbeddingProvider:
    def __init__(self, url: str, dim: int, **kw):
        self._endpoint = _JsonEndpoint(url, **kw)
        self.dim = dim
        self.provider_id = f"embed@{_host_tag(url)}-{dim}"

    def embed(self, texts):
        body = self._endpoint.post({"texts": list(texts)})
        vectors = body.get("vectors")
        if not isinstance(vectors, list):
            raise ModelOutputError(
                "embedding response lacks 'vectors'", raw_output=json.dumps(body)
            )
        return vectors


class HttpSummarizerBackend:
    def __init__(self, url: str, **kw):
        self._endpoint = _JsonEndpoint(url, **kw)
        self.backend_id = f"summarizer@{_host_tag(url)}"

    def generate(self, drug: str, groups: dict) -> str:
        body = self._endpoint.post({"drug": drug, "groups": groups})
        if "summary" not in body:
            raise ModelOutputError(
                "summarizer response lacks 'summary'", raw_output=json.dumps(body)
            )
        return str(body["summary"])


class HttpScoringBackend:
    def __init__(self, url: str, **kw):
        self._endpoint = _JsonEndpoint(url, **kw)
        self.backend_id = f"scorer@{_host_tag(url)}"

    def logprob(self, prompt: str, completion: str) -> float:
        body = self._endpoint.post({"prompt": prompt, "completion": completion})
        if "logprob" not in body:
            raise ModelOutputError(
                "scoring response lacks 'logprob'", raw_output=json.dumps(body)
            )
        value = float(body["logprob"])
        if value > 0:
            raise ModelOutputError(
                f"scoring endpoint returned a positive log-probability {value}",
                raw_output=json.dumps(body),
            )
        return value


# ---------------------------------------------------------------------------
# replay doubles
# ---------------------------------------------------------------------------


class ReplayCompletionBackend:
    """Canned prompt -> text mapping; unknown prompts fail like an outage."""

    def __init__(self, responses: dict, backend_id: str = "replay-llm"):
        self.responses = dict(responses)
        self.backend_id = backend_id

    def complete(self, prompt: str) -> str:
        try:
            return self.responses[prompt]
        except KeyError:
            raise TransportError("no canned response for this prompt")


class ReplaySummarizerBackend:
    def __init__(self, summaries: dict, backend_id: str = "replay-summarizer"):
        self.summaries = dict(summaries)
        self.backend_id = backend_id

    def generate(self, drug: str, groups: dict) -> str:
        try:
            return self.summaries[drug]
        except KeyError:
            raise TransportError(f"no canned summary for drug {drug!r}")


class ReplayScoringBackend:
    """Deterministic stand-in scorer: logprob from a keyed table or a rule."""

    def __init__(self, table=None, fallback=None, backend_id: str = "replay-scorer"):
        self.table = dict(table or {})
        self.fallback = fallback
        self.backend_id = backend_id

    def logprob(self, prompt: str, completion: str) -> float:
        key = (prompt, completion)
        if key in self.table:
            return self.table[key]
        if self.fallback is not None:
            return self.fallback(prompt, completion)
        raise TransportError("no canned score for this pair")
