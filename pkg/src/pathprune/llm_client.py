"""HTTP completion backend with per-token log-probabilities.

Drives any endpoint speaking the de-facto completions schema (request:
{model, prompt, max_tokens, temperature, top_p, logprobs}; response: choices
with token strings and their log-probabilities) and exposes the same
launch/resume/rollout surface as the simulator.

A stateless HTTP API cannot hand back a KV cache, so Resume re-submits the
prompt plus the prefix text and the re-encoding cost of that prefix is
charged as resume-stage overhead. Checkpoint features are synthesized from
log-probability statistics (degraded-feature mode); hidden states are not
available over the wire.

The transport is injectable, so the test suite replays recorded fixtures and
never needs a live endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .core import COMPLETED, LAUNCHED, PathRecord, QueryRecord
from .errors import CapabilityError, ConfigError, EndpointError, LifecycleError, TruncationError

log = logging.getLogger(__name__)

DEFAULT_ANSWER_PATTERNS = (
    r"\\boxed\{([^{}]+)\}",
    r"\"ANSWER\"\s*:\s*\"([^\"]+)\"",
)

_FEATURE_WINDOW = 32


@dataclass(frozen=True)
class EndpointConfig:
    """Connection and sampling settings; the defaults match the evaluation
    protocol (temperature 0.6, top-p 0.95, top-k 40)."""

    base_url: str
    model_name: str
    api_key_env_var: str = "PATHPRUNE_API_KEY"
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 40
    max_resume_tokens: int = 4096
    timeout_s: float = 60.0
    max_retries: int = 2
    retry_backoff_s: float = 0.5
    max_in_flight: int = 4
    feature_dim: int = 16
    answer_patterns: tuple = DEFAULT_ANSWER_PATTERNS

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.feature_dim < 6:
            raise ConfigError("feature_dim must be >= 6 to hold the logprob statistics")


def _hash_token(token: str) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=4).digest()
    return int.from_bytes(digest, "big") % (2 ** 31)


def logprob_features(logprobs: np.ndarray, prefix_length: int, dim: int) -> np.ndarray:
    """Fixed-width feature vector from per-token log-probabilities.

    Mean, extremes, spread, tail behavior and sliding-window minima: the
    degraded stand-in for hidden-state features over a text-only API.
    """
    lps = np.asarray(logprobs, dtype=np.float64)
    w = min(_FEATURE_WINDOW, len(lps))
    csum = np.concatenate([[0.0], np.cumsum(lps)])
    window_means = (csum[w:] - csum[:-w]) / w if len(lps) >= w else np.array([np.mean(lps)])
    stats = [
        float(np.mean(lps)),
        float(np.min(lps)),
        float(np.max(lps)),
        float(np.std(lps)),
        float(np.mean(lps[-w:])),
        len(lps) / prefix_length,
        float(np.min(window_means)),
        float(np.median(window_means)),
    ]
    out = np.zeros(dim)
    out[: len(stats)] = stats[:dim]
    return out


class HttpBackend:
    """Launch/resume/rollout over a completions endpoint."""

    def __init__(self, config: EndpointConfig, transport=None):
        self.config = config
        self._transport = transport or self._requests_transport
        self._gate = threading.Semaphore(config.max_in_flight)
        self._lock = threading.Lock()
        self._prompts: dict[str, str] = {}
        self._gold: dict[str, str] = {}

    # -- transport -----------------------------------------------------------

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env_var)
        if not key:
            raise ConfigError(
                f"API key environment variable {self.config.api_key_env_var} is not set"
            )
        return key

    def _requests_transport(self, url: str, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        try:
            resp = requests.post(
                url, json=payload, headers=headers, timeout=self.config.timeout_s
            )
        except requests.RequestException as exc:
            raise EndpointError(f"transport failure talking to {url}: {exc}") from exc
        if resp.status_code != 200:
            raise EndpointError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def _post(self, payload: dict) -> dict:
        url = self.config.base_url.rstrip("/") + "/completions"
        attempts = self.config.max_retries + 1
        last_exc = None
        for attempt in range(attempts):
            try:
                with self._gate:
                    return self._transport(url, payload)
            except EndpointError as exc:
                last_exc = exc
                if attempt + 1 < attempts:
                    log.warning("retrying after transport failure (%d left): %s",
                                attempts - attempt - 1, exc)
                    if self.config.retry_backoff_s:
                        time.sleep(self.config.retry_backoff_s * (2 ** attempt))
        raise EndpointError(
            f"gave up after {attempts} attempts: {last_exc}"
        ) from last_exc

    # -- response decoding -----------------------------------------------------

    def _decode(self, response: dict, partial=None) -> tuple[str, list, np.ndarray, str | None]:
        err = response.get("error")
        if err:
            code = err.get("code", "") if isinstance(err, dict) else str(err)
            if "context" in str(code):
                raise TruncationError(f"endpoint context overflow: {err}", partial=partial)
            raise EndpointError(f"endpoint error: {err}")
        try:
            choice = response["choices"][0]
        except (KeyError, IndexError) as exc:
            raise CapabilityError(
                f"{self.config.base_url}: response carries no choices"
            ) from exc
        lp_block = choice.get("logprobs")
        if not lp_block or lp_block.get("token_logprobs") is None:
            raise CapabilityError(
                f"{self.config.base_url} did not return token log-probabilities; "
                "enable logprobs support on the endpoint"
            )
        tokens = lp_block.get("tokens") or []
        lps = [min(0.0, float(v)) for v in lp_block["token_logprobs"]]
        if len(tokens) != len(lps):
            raise CapabilityError("endpoint returned misaligned tokens and logprobs")
        return choice.get("text", ""), tokens, np.array(lps, dtype=np.float64), choice.get("finish_reason")

    def _payload(self, prompt: str, max_tokens: int) -> dict:
        cfg = self.config
        return {
            "model": cfg.model_name,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "top_k": cfg.top_k,
            "logprobs": 1,
        }

    def _parse_answer(self, text: str) -> str | None:
        for pattern in self.config.answer_patterns:
            matches = re.findall(pattern, text)
            if matches:
                return matches[-1].strip()
        return None

    # -- backend interface -------------------------------------------------

    def launch_prefix(self, query: QueryRecord, path_id: int, prefix_length: int) -> PathRecord:
        if prefix_length < 1:
            raise ValueError("prefix_length must be >= 1")
        with self._lock:
            self._prompts[query.query_id] = query.prompt
            self._gold[query.query_id] = query.gold_answer
        response = self._post(self._payload(query.prompt, prefix_length))
        text, tokens, lps, _ = self._decode(response)
        features = None
        if len(tokens) >= prefix_length:
            features = logprob_features(lps, prefix_length, self.config.feature_dim)
        return PathRecord(
            query_id=query.query_id,
            path_id=path_id,
            tokens=[_hash_token(t) for t in tokens],
            token_logprobs=lps,
            status=LAUNCHED,
            checkpoint_features=features,
            text=text,
        )

    def resume_path(self, path: PathRecord, salt: int = 0) -> PathRecord:
        if path.status != LAUNCHED:
            raise LifecycleError(
                f"{path.query_id}/{path.path_id}: cannot resume a {path.status} path"
            )
        with self._lock:
            prompt = self._prompts.get(path.query_id)
            gold = self._gold.get(path.query_id)
        if prompt is None:
            raise LifecycleError(
                f"{path.query_id}: resume without a prior launch on this client"
            )
        context = prompt + (path.text or "")
        response = self._post(self._payload(context, self.config.max_resume_tokens))
        text, tokens, lps, _ = self._decode(response, partial=path)
        full_text = (path.text or "") + text
        answer = self._parse_answer(full_text)
        if answer is None:
            answer = full_text.strip().splitlines()[-1].strip() if full_text.strip() else ""
        return PathRecord(
            query_id=path.query_id,
            path_id=path.path_id,
            tokens=np.concatenate([path.tokens, [_hash_token(t) for t in tokens]]),
            token_logprobs=np.concatenate([path.token_logprobs, lps.astype(np.float32)]),
            status=COMPLETED,
            checkpoint_features=path.checkpoint_features,
            answer=answer,
            is_correct=None if not gold else answer == gold.strip(),
            text=full_text,
        )

    def rollout_from_prefix(self, path: PathRecord, k: int, salt: int = 0) -> list[PathRecord]:
        """K fresh completions of the same prefix; sampling noise comes from
        the endpoint, so salt is accepted only for interface parity."""
        if k < 1:
            raise ValueError("rollout count must be >= 1")
        return [self.resume_path(path) for _ in range(k)]

    def resume_overhead_tokens(self, path: PathRecord) -> int:
        """The endpoint re-encodes the prefix as prompt context on resume."""
        return path.num_tokens
