"""HTTP logit server: exposes one TokenScorer over the JSON wire protocol.

    POST /v1/score  {"v": 1, "vocab_hash": "<16 hex>", "tokens": [ids]}
                 -> {"v": 1, "logits": [[f64 x V] per position]}
    GET  /v1/info   -> {"v": 1, "name", "vocab_hash", "vocab_size"}
"""

from __future__ import annotations

import contextlib
import socket
import threading
import time

import uvicorn
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .scorer import TokenScorer

PROTOCOL_VERSION = 1


class ScoreRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    v: int
    vocab_hash: str
    tokens: list[int]


class ScoreResponse(BaseModel):
    v: int
    logits: list[list[float]]


class ServerInfo(BaseModel):
    v: int
    name: str
    vocab_hash: str
    vocab_size: int


class ErrorBody(BaseModel):
    v: int = PROTOCOL_VERSION
    error: str
    detail: str = ""


def _error(status: int, error: str, detail: str = "") -> JSONResponse:
    return JSONResponse(ErrorBody(error=error, detail=detail).model_dump(), status_code=status)


def create_app(scorer: TokenScorer) -> FastAPI:
    app = FastAPI(title=f"packfuse logit server ({scorer.name})")
    expected_hash = scorer.vocab.hash
    size = len(scorer.vocab)

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.get("/v1/info", response_model=ServerInfo)
    def info():
        return ServerInfo(v=PROTOCOL_VERSION, name=scorer.name, vocab_hash=expected_hash, vocab_size=size)

    @app.post("/v1/score", response_model=ScoreResponse, responses={400: {"model": ErrorBody},
                                                                     409: {"model": ErrorBody}})
    def score(req: ScoreRequest):
        if req.v != PROTOCOL_VERSION:
            return _error(400, "unsupported_version", f"server speaks v{PROTOCOL_VERSION}")
        if req.vocab_hash != expected_hash:
            return _error(409, "vocab_hash_mismatch", f"server vocabulary hash is {expected_hash}")
        if not req.tokens:
            return _error(400, "empty_sequence")
        if min(req.tokens) < 0 or max(req.tokens) >= size:
            return _error(400, "token_out_of_range", f"ids must lie in [0, {size})")
        logits = scorer.score(req.tokens)
        return ScoreResponse(v=PROTOCOL_VERSION, logits=logits.tolist())

    return app


@contextlib.contextmanager
def serve_in_thread(app: FastAPI, host: str = "127.0.0.1", port: int = 0, timeout: float = 10.0):
    """Run ``app`` under uvicorn in a daemon thread; yields the base URL."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    bound_port = sock.getsockname()[1]
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off"))
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True)
    thread.start()
    deadline = time.monotonic() + timeout
    while not server.started:
        if not thread.is_alive() or time.monotonic() > deadline:
            raise RuntimeError("logit server failed to start")
        time.sleep(0.01)
    try:
        yield f"http://{host}:{bound_port}"
    finally:
        server.should_exit = True
        thread.join(timeout)
        sock.close()
