"""Pluggable external-LLM clients: an HTTP-JSON adapter and deterministic mocks."""
import logging
from typing import Callable, Optional, Protocol

import httpx

from app.config import LLM_API_KEY, LLM_ENDPOINT, LLM_TIMEOUT_S

logger = logging.getLogger(__name__)


class LLMResponseError(ValueError):
    """The endpoint answered, but not with a {"text": ...} JSON object."""


class LLMClient(Protocol):
    async def complete(self, prompt: str) -> str:
        """Send {prompt} and return the response text."""
        ...


class StaticMockClient:
    """Answers every prompt with a fixed string, or with responder(prompt)."""

    def __init__(self, response: str = "1", responder: Optional[Callable[[str], str]] = None):
        self.response = response
        self.responder = responder
        self.prompts: list[str] = []

    async def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if self.responder is not None:
            return self.responder(prompt)
        return self.response


class HttpLLMClient:
    """POSTs {"prompt": ...} to an endpoint and reads {"text": ...} back."""

    def __init__(
            self,
            endpoint: Optional[str] = None,
            api_key: str = LLM_API_KEY,
            timeout: float = LLM_TIMEOUT_S,
            transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        endpoint = LLM_ENDPOINT if endpoint is None else endpoint
        if not endpoint:
            raise ValueError("LLM_ENDPOINT is not configured")
        self.endpoint = endpoint
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.timeout = timeout
        self.transport = transport

    async def complete(self, prompt: str) -> str:
        async with httpx.AsyncClient(timeout=self.timeout, transport=self.transport) as client:
            response = await client.post(self.endpoint, json={"prompt": prompt}, headers=self.headers)
            response.raise_for_status()
            try:
                body = response.json()
            except ValueError as exc:
                raise LLMResponseError(f"LLM response is not JSON: {response.text[:80]!r}") from exc
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise LLMResponseError("LLM response body must be a JSON object with a 'text' string")
        return body["text"]
