"""JSON query service over a FrozenIndex.

Request (one object, or an array of them for a batch)::

    {"clauses": {"geo": [129], "skill": [234]}, "embedding": [...], "k": 10,
     "options": {"quantEnabled": true, "quantK": 2000, "granularity": 100}}

Response for one object::

    {"version": 1, "results": [{"docId": "...", "score": 0.93}, ...],
     "timings": {"tbrMs": ..., "quantMs": ..., "ebrMs": ..., "topkMs": ...}}

An array request returns an array of such objects in request order; items
that fail validation carry ``{"version": 1, "error": {...}}`` in their place.
Whole-request failures return a 4xx status with an ``error`` object.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from concurrent.futures import Future
from dataclasses import asdict, dataclass, fields
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import numpy as np

from . import corpus, knn, quantizer
from .pipeline import BatchItemError, Executor, HybridQuery, QueryOptions, make_query
from .term_match import QueryError

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_BODY_BYTES = 64 * 1024 * 1024


@dataclass(frozen=True)
class ServiceConfig:
    index_path: str = ""
    max_batch: int = 16
    default_k: int = 10
    num_bits: int = 512
    quant_k_multiplier: int = quantizer.DEFAULT_QUANT_K_MULTIPLIER
    granularity: int = knn.DEFAULT_GRANULARITY
    quant_enabled: bool = False
    host: str = "127.0.0.1"
    port: int = 8080
    workers: int = 2

    def validate(self) -> None:
        for name in ("max_batch", "default_k", "num_bits", "quant_k_multiplier", "granularity", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.port < 65536:
            raise ValueError(f"port out of range: {self.port}")

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown service config keys: {sorted(unknown)}")
        return cls(**data)


class RequestError(Exception):
    """A request the service refuses; carries the HTTP status to send."""

    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.status = status

    def body(self) -> dict:
        return {"version": PROTOCOL_VERSION, "error": {"code": self.code, "message": str(self)}}


def error_body(code: str, message: str) -> dict:
    return RequestError(code, message).body()


class QueryService:
    """Fixed pool of workers, each owning one Executor, fed from a queue.

    ``handle`` is transport-free so it can be driven by the HTTP server or
    directly by tests and the CLI.
    """

    def __init__(self, index, config: ServiceConfig):
        config.validate()
        self.index = index
        self.config = config
        if index.num_bits != config.num_bits:
            log.warning("index was built with %d bits, config says %d", index.num_bits, config.num_bits)
        self._jobs: queue.Queue = queue.Queue()
        self._closed = threading.Event()
        self._workers = [
            threading.Thread(target=self._work, args=(Executor(index, config.max_batch),), name=f"executor-{i}", daemon=True)
            for i in range(config.workers)
        ]
        for t in self._workers:
            t.start()

    # -- lifecycle ------------------------------------------------------------

    def close(self, timeout: float | None = None) -> None:
        """Stop accepting work, let queued batches finish, join the workers."""
        if self._closed.is_set():
            return
        self._closed.set()
        for _ in self._workers:
            self._jobs.put(None)
        for t in self._workers:
            t.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _work(self, executor: Executor) -> None:
        while True:
            job = self._jobs.get()
            if job is None:
                return
            batch, future = job
            if not future.set_running_or_notify_cancel():
                continue
            try:
                results = executor.execute_batch(batch)
                future.set_result((results, executor.last_timings.as_dict()))
            except BaseException as exc:  # handed back to the caller
                future.set_exception(exc)

    def submit(self, batch: list[HybridQuery]) -> Future:
        if self._closed.is_set():
            raise RequestError("unavailable", "service is shutting down", 503)
        future: Future = Future()
        self._jobs.put((batch, future))
        return future

    # -- protocol -------------------------------------------------------------

    def parse_query(self, payload: Any) -> HybridQuery:
        if not isinstance(payload, dict):
            raise QueryError("request must be a JSON object")
        unknown = set(payload) - {"clauses", "embedding", "k", "options"}
        if unknown:
            raise QueryError(f"unknown request fields: {sorted(unknown)}")
        clauses = payload.get("clauses") or {}
        if not isinstance(clauses, dict):
            raise QueryError("clauses must be an object of slot -> attribute ids")
        opts = payload.get("options") or {}
        if not isinstance(opts, dict):
            raise QueryError("options must be an object")
        unknown = set(opts) - {"quantEnabled", "quantK", "granularity"}
        if unknown:
            raise QueryError(f"unknown options: {sorted(unknown)}")
        k = payload.get("k", self.config.default_k)
        quant_k = opts.get("quantK")
        if quant_k is None and isinstance(k, int) and not isinstance(k, bool):
            quant_k = quantizer.default_quant_k(max(k, 1), self.config.quant_k_multiplier)
        if quant_k is not None and (isinstance(quant_k, bool) or not isinstance(quant_k, int)):
            raise QueryError("quantK must be an integer")
        granularity = opts.get("granularity", self.config.granularity)
        if isinstance(granularity, bool) or not isinstance(granularity, int):
            raise QueryError("granularity must be an integer")
        options = QueryOptions(bool(opts.get("quantEnabled", self.config.quant_enabled)), quant_k, granularity)
        return make_query(self.index, clauses, payload.get("embedding"), k, options)

    def _result_body(self, result, timings: dict) -> dict:
        if isinstance(result, BatchItemError):
            return error_body("invalid_query", result.message)
        return {
            "version": PROTOCOL_VERSION,
            "results": [{"docId": d, "score": float(s)} for d, s in result.items()],
            "timings": timings,
        }

    def handle(self, payload: Any) -> tuple[int, Any]:
        """(HTTP status, JSON body) for a decoded request payload."""
        try:
            if isinstance(payload, list):
                return 200, self._handle_batch(payload)
            try:
                query = self.parse_query(payload)
            except QueryError as exc:
                raise RequestError("invalid_query", str(exc)) from exc
            results, timings = self.submit([query]).result()
            body = self._result_body(results[0], timings)
            return (400 if "error" in body else 200), body
        except RequestError as exc:
            return exc.status, exc.body()
        except Exception as exc:  # never let one request take the process down
            log.exception("request failed")
            return 500, error_body("internal", f"{type(exc).__name__}: {exc}")

    def _handle_batch(self, payload: list) -> list[dict]:
        if not payload:
            raise RequestError("invalid_request", "empty batch")
        if len(payload) > self.config.max_batch:
            raise RequestError("batch_too_large", f"batch of {len(payload)} exceeds maxBatch {self.config.max_batch}", 413)
        parsed: list[HybridQuery | QueryError] = []
        for item in payload:
            try:
                parsed.append(self.parse_query(item))
            except QueryError as exc:
                parsed.append(exc)
        valid = [q for q in parsed if isinstance(q, HybridQuery)]
        results, timings = self.submit(valid).result() if valid else ([], {})
        out, it = [], iter(results)
        for q in parsed:
            if isinstance(q, QueryError):
                out.append(error_body("invalid_query", str(q)))
            else:
                out.append(self._result_body(next(it), timings))
        return out


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def make_handler(service: QueryService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, body: Any) -> None:
            data = json.dumps(body, default=_json_default).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"version": PROTOCOL_VERSION, "numDocs": service.index.num_docs, "dim": service.index.dim})
            else:
                self._send(404, error_body("not_found", self.path))

        def do_POST(self):
            if self.path not in ("/query", "/"):
                self._send(404, error_body("not_found", self.path))
                return
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY_BYTES:
                self._send(413, error_body("too_large", f"body exceeds {MAX_BODY_BYTES} bytes"))
                return
            try:
                payload = json.loads(self.rfile.read(length) or b"null")
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                self._send(400, error_body("bad_json", str(exc)))
                return
            self._send(*service.handle(payload))

        def log_message(self, fmt, *args):
            log.debug("%s - " + fmt, self.address_string(), *args)

    return Handler


class QueryServer:
    """HTTP front end; ``shutdown`` stops listening and drains the service."""

    def __init__(self, service: QueryService):
        self.service = service
        self.httpd = ThreadingHTTPServer((service.config.host, service.config.port), make_handler(service))
        self.httpd.daemon_threads = True

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="http", daemon=True)
        t.start()
        return t

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.service.close()


def load_service(config: ServiceConfig) -> QueryService:
    return QueryService(corpus.load(config.index_path), config)


def config_dict(config: ServiceConfig) -> dict:
    return asdict(config)
