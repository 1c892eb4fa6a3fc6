"""Newline-delimited JSON oracle protocol over TCP.

Request ``{"id": <int>, "x": [<float>, ...]}``, response
``{"id": <int>, "label": <int>}``, one UTF-8 object per line. Clients match
responses by id, so a server is free to answer out of order. A line that is
not JSON gets ``{"id": null, "error": "parse"}``; the connection stays open.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import math
import socket
import threading

import numpy as np

from .errors import ServiceError, TransportError
from .nn import Classifier

log = logging.getLogger(__name__)

READ_CHUNK = 1 << 16


def _error(req_id, code: str) -> dict:
    return {"id": req_id, "error": code}


def _decode(line: bytes, dim: int):
    """-> (id, features) or an error response dict."""
    try:
        msg = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return _error(None, "parse")
    if not isinstance(msg, dict):
        return _error(None, "request")
    req_id = msg.get("id")
    if not isinstance(req_id, int) or isinstance(req_id, bool):
        return _error(None, "request")
    x = msg.get("x")
    if not isinstance(x, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in x):
        return _error(req_id, "request")
    if len(x) != dim:
        return _error(req_id, "shape")
    if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in x):
        return _error(req_id, "range")
    return req_id, x


class OracleServer:
    """Serves one read-only classifier to any number of connections.

    Every complete line in a read chunk is answered from a single batched
    forward pass.
    """

    def __init__(self, classifier: Classifier, host: str = "127.0.0.1", port: int = 0,
                 log_every: int = 1000):
        self.classifier = classifier
        self.host = host
        self.port = port
        self.log_every = log_every
        self.query_count = 0
        self._lock = threading.Lock()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.base_events.Server | None = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()
        self._startup_error: BaseException | None = None

    def _count(self, k: int) -> None:
        with self._lock:
            before = self.query_count
            self.query_count += k
            if self.log_every and before // self.log_every != self.query_count // self.log_every:
                log.info("oracle query_count=%d", self.query_count)

    def answer(self, lines: list[bytes]) -> list[dict]:
        dim = self.classifier.input_dim
        decoded = [_decode(line, dim) for line in lines]
        good = [i for i, d in enumerate(decoded) if isinstance(d, tuple)]
        out: list[dict] = [d if isinstance(d, dict) else {} for d in decoded]
        if good:
            X = np.array([decoded[i][1] for i in good], dtype=np.float64)
            labels = np.atleast_1d(self.classifier.predict(X))
            for i, lab in zip(good, labels):
                out[i] = {"id": decoded[i][0], "label": int(lab)}
            self._count(len(good))
        return out

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer = writer.get_extra_info("peername")
        buf = b""
        try:
            while True:
                chunk = await reader.read(READ_CHUNK)
                if not chunk:
                    break
                buf += chunk
                *lines, buf = buf.split(b"\n")
                lines = [ln.strip() for ln in lines if ln.strip()]
                if not lines:
                    continue
                responses = self.answer(lines)
                writer.write(b"".join(json.dumps(r).encode("utf-8") + b"\n" for r in responses))
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            log.info("connection %s closed; query_count=%d", peer, self.query_count)
            writer.close()

    async def _start(self):
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("oracle listening on %s:%d", self.host, self.port)

    def _run(self):
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self._start())
        except OSError as exc:
            self._startup_error = exc
            self._ready.set()
            return
        self._ready.set()
        try:
            self._loop.run_forever()
        finally:
            self._server.close()
            pending = asyncio.all_tasks(self._loop)
            for task in pending:
                task.cancel()
            self._loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
            self._loop.run_until_complete(self._server.wait_closed())
            self._loop.close()

    def start(self) -> tuple[str, int]:
        """Start serving on a background thread; returns the bound address."""
        self._thread = threading.Thread(target=self._run, name="oracle-server", daemon=True)
        self._thread.start()
        self._ready.wait()
        if self._startup_error is not None:
            raise ServiceError(f"cannot bind {self.host}:{self.port}: {self._startup_error}")
        return self.host, self.port

    def stop(self) -> None:
        if self._loop is not None and self._thread is not None:
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)

    def wait(self) -> None:
        """Block until the server thread exits."""
        if self._thread is not None:
            self._thread.join()

    def serve_forever(self) -> None:
        self.start()
        try:
            self.wait()
        except KeyboardInterrupt:
            self.stop()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


class RemoteOracle:
    """Client side of the protocol; pipelines requests in chunks."""

    def __init__(self, host: str, port: int, null_label: int | None = None,
                 timeout: float = 30.0, chunk: int = 256):
        self.host = host
        self.port = port
        self.null_label = null_label
        self.timeout = timeout
        self.chunk = chunk
        self._sock: socket.socket | None = None
        self._file = None
        self._ids = itertools.count()
        self._lock = threading.Lock()
        self._count = 0

    @property
    def query_count(self) -> int:
        return self._count

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"cannot reach oracle at {self.host}:{self.port}: {exc}") from exc
            self._file = self._sock.makefile("rb")

    def close(self) -> None:
        if self._sock is not None:
            self._file.close()
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def query(self, x) -> int:
        return int(self.query_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def query_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(len(X), dtype=np.int64)
        with self._lock:
            self._connect()
            for start in range(0, len(X), self.chunk):
                block = X[start:start + self.chunk]
                ids = [next(self._ids) for _ in range(len(block))]
                payload = b"".join(
                    json.dumps({"id": i, "x": row.tolist()}).encode("utf-8") + b"\n"
                    for i, row in zip(ids, block))
                try:
                    self._sock.sendall(payload)
                    pending = {i: start + j for j, i in enumerate(ids)}
                    while pending:
                        line = self._file.readline()
                        if not line:
                            raise TransportError("oracle closed the connection")
                        msg = json.loads(line)
                        if "error" in msg:
                            raise TransportError(f"oracle error {msg['error']!r} for id {msg.get('id')}")
                        pos = pending.pop(msg["id"], None)
                        if pos is None:
                            raise TransportError(f"unexpected response id {msg['id']}")
                        out[pos] = int(msg["label"])
                except (OSError, ValueError, KeyError) as exc:
                    self.close()
                    raise TransportError(f"oracle transport failed: {exc}") from exc
                self._count += len(block)
        return out
