"""Client side of the logit wire protocol."""

from __future__ import annotations

import json
import logging
import time
from typing import Sequence

import httpx
import numpy as np

from .errors import ProtocolError, RemoteTimeout, RemoteUnavailable, VocabHashMismatch
from .scorer import TokenScorer, TokenSequence, Vocabulary
from .service import PROTOCOL_VERSION

log = logging.getLogger(__name__)


def _post(client: httpx.Client, url: str, payload: dict, retries: int, backoff: float) -> httpx.Response:
    for attempt in range(retries + 1):
        try:
            return client.post(url, json=payload)
        except httpx.TransportError as exc:
            if attempt == retries:
                if isinstance(exc, httpx.TimeoutException):
                    raise RemoteTimeout(f"{url}: timed out after {retries + 1} attempts") from exc
                raise RemoteUnavailable(f"{url}: {exc}") from exc
            delay = backoff * 2 ** attempt
            log.warning("request to %s failed (%s); retrying in %.2fs", url, exc, delay)
            time.sleep(delay)
    raise AssertionError("unreachable")


def parse_score_response(resp: httpx.Response, n_tokens: int, vocab_size: int) -> np.ndarray:
    try:
        body = json.loads(resp.content)
    except ValueError as exc:
        raise ProtocolError(f"response is not valid JSON ({len(resp.content)} bytes)") from exc
    if not isinstance(body, dict):
        raise ProtocolError("response must be a JSON object")
    if resp.status_code == 409 and body.get("error") == "vocab_hash_mismatch":
        raise VocabHashMismatch(body.get("detail", "vocabulary hash mismatch"))
    if resp.status_code != 200:
        raise ProtocolError(f"HTTP {resp.status_code}: {body.get('error', body)}")
    if body.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {body.get('v')!r}")
    rows = body.get("logits")
    if not isinstance(rows, list) or len(rows) != n_tokens:
        raise ProtocolError(f"expected {n_tokens} logit rows")
    if any(not isinstance(r, list) or len(r) != vocab_size for r in rows):
        raise ProtocolError(f"every logit row must have {vocab_size} entries")
    try:
        logits = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError("logit rows must hold numbers") from exc
    if not np.all(np.isfinite(logits)):
        raise ProtocolError("non-finite logits in response")
    return logits


def remote_score(endpoint: str, seq: TokenSequence | Sequence[int], vocab: Vocabulary, *,
                 client: httpx.Client | None = None, timeout: float = 30.0,
                 retries: int = 3, backoff: float = 0.1) -> np.ndarray:
    """Fetch per-position logits for ``seq`` from a logit server at ``endpoint``."""
    ids = list(seq.ids if isinstance(seq, TokenSequence) else seq)
    payload = {"v": PROTOCOL_VERSION, "vocab_hash": vocab.hash, "tokens": ids}
    url = endpoint.rstrip("/") + "/v1/score"
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = _post(client, url, payload, retries, backoff)
    finally:
        if own:
            client.close()
    return parse_score_response(resp, len(ids), len(vocab))


class RemoteScorer(TokenScorer):
    """A TokenScorer whose forward pass happens on a logit server."""

    def __init__(self, name: str, endpoint: str, vocab: Vocabulary, *, timeout: float = 30.0,
                 retries: int = 3, backoff: float = 0.1, client: httpx.Client | None = None):
        self.name = name
        self.endpoint = endpoint
        self.vocab = vocab
        self.retries = retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, ids: Sequence[int]) -> np.ndarray:
        return remote_score(self.endpoint, ids, self.vocab, client=self._client,
                            retries=self.retries, backoff=self.backoff)

    def info(self) -> dict:
        resp = self._client.get(self.endpoint.rstrip("/") + "/v1/info")
        if resp.status_code != 200:
            raise ProtocolError(f"HTTP {resp.status_code} from /v1/info")
        return resp.json()

    def close(self) -> None:
        self._client.close()
