"""Client for the optional remote prompt rewriter, with deterministic fallback."""
import logging
import time
from typing import Callable, List, Optional, Sequence

import httpx
from pydantic import ValidationError

from app.config import Settings, get_settings
from app.data.text import prompt_align
from app.models import RewriteRequest, RewriteResponse

logger = logging.getLogger(__name__)

INSTRUCTION = (
    "Keep every sentence of the report. For each concept from the vocabulary that the report "
    "mentions, append the sentence 'there is <concept> .' on its own line."
)


class RewriteService:
    """Rewrites report sentence lists through ``POST {endpoint}``.

    Transport errors, timeouts, bad status codes and malformed bodies are retried
    with exponential backoff, then answered by the rule-based ``prompt_align``.
    After ``max_failures`` consecutive fallbacks the endpoint is no longer tried.
    """

    def __init__(
        self,
        concepts: Sequence[str],
        endpoint: Optional[str] = None,
        client: Optional[httpx.Client] = None,
        settings: Optional[Settings] = None,
        sleep: Callable[[float], None] = time.sleep,
        max_failures: int = 3,
    ):
        settings = settings or get_settings()
        self.concepts = list(concepts)
        self.endpoint = endpoint
        self.timeout = settings.rewriter_timeout_s
        self.retries = settings.rewriter_retries
        self.backoff = settings.rewriter_backoff_s
        self.client = client
        self.sleep = sleep
        self.max_failures = max_failures
        self.stats = {"remote": 0, "fallback": 0, "attempts": 0}
        self._consecutive_failures = 0

    @property
    def available(self) -> bool:
        return bool(self.endpoint) and self._consecutive_failures < self.max_failures

    def rewrite(self, sentences: List[str]) -> List[str]:
        if not self.available:
            return self._fallback(sentences, reason=None)
        try:
            rewritten = self.remote_rewrite("\n".join(sentences))
        except (httpx.HTTPError, ValidationError, ValueError) as exc:
            self._consecutive_failures += 1
            if self._consecutive_failures == self.max_failures:
                logger.warning("remote rewriter disabled after %d consecutive failures", self.max_failures)
            return self._fallback(sentences, reason=exc)
        self._consecutive_failures = 0
        self.stats["remote"] += 1
        lines = [line.strip() for line in rewritten.splitlines()]
        return [line for line in lines if line] or list(sentences)

    def remote_rewrite(self, report: str) -> str:
        """One rewriter round trip with retries; raises the last error when all attempts fail."""
        payload = RewriteRequest(report=report, instruction=INSTRUCTION, vocab=self.concepts)
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self.stats["attempts"] += 1
            try:
                response = self._post(payload.model_dump())
                response.raise_for_status()
                return RewriteResponse.model_validate(response.json()).rewritten
            except (httpx.HTTPError, ValidationError, ValueError) as exc:
                last_error = exc
                logger.debug("rewriter attempt %d failed: %s", attempt + 1, exc)
        raise last_error

    def _post(self, body: dict) -> httpx.Response:
        if self.client is not None:
            return self.client.post(self.endpoint, json=body, timeout=self.timeout)
        with httpx.Client(timeout=self.timeout) as client:
            return client.post(self.endpoint, json=body)

    def _fallback(self, sentences: List[str], reason: Optional[Exception]) -> List[str]:
        if reason is not None:
            logger.warning("remote rewrite failed (%s); using rule-based prompt alignment", reason)
        self.stats["fallback"] += 1
        return prompt_align(sentences, self.concepts)
