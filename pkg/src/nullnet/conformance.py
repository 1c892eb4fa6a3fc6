"""Conformance checks for a running oracle service.

Usage: ``python -m nullnet.conformance HOST:PORT --dim 784``

Each check prints one PASS/FAIL line; the exit status is the number of
failures. Out-of-order handling is checked by routing a client through a
local proxy that reverses every burst of responses.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import threading
import time
from dataclasses import dataclass

import numpy as np

from .protocol import RemoteOracle, parse_address


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


class _LineClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.file = self.sock.makefile("rb")

    def send(self, raw: bytes) -> None:
        self.sock.sendall(raw)

    def recv(self) -> dict:
        line = self.file.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close(self) -> None:
        self.file.close()
        self.sock.close()


def _request(i: int, x) -> bytes:
    return json.dumps({"id": i, "x": [float(v) for v in x]}).encode("utf-8") + b"\n"


class ReversingProxy:
    """Forwards client lines to the server and returns each burst of
    responses in reverse order, so ids arrive out of order."""

    def __init__(self, host: str, port: int):
        self.upstream = (host, port)
        self.listener = socket.create_server(("127.0.0.1", 0))
        self.port = self.listener.getsockname()[1]
        self.reordered = 0  # responses delivered in a burst of two or more
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        try:
            conn, _ = self.listener.accept()
        except OSError:
            return
        up = socket.create_connection(self.upstream)
        uin = up.makefile("rb")
        buf = b""
        try:
            while True:
                chunk = conn.recv(1 << 16)
                if not chunk:
                    break
                buf += chunk
                *burst, buf = buf.split(b"\n")
                if not burst:
                    continue
                up.sendall(b"".join(line + b"\n" for line in burst))
                answers = [uin.readline() for _ in burst]
                if len(burst) > 1:
                    self.reordered += len(burst)
                conn.sendall(b"".join(reversed(answers)))
        except OSError:
            pass
        finally:
            uin.close()
            up.close()
            conn.close()

    def close(self) -> None:
        self.listener.close()


def run_checks(host: str, port: int, dim: int, queries: int = 1000, seed: int = 0,
               time_limit: float = 10.0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    X = rng.random((queries, dim))
    out: list[CheckResult] = []

    c = _LineClient(host, port)
    try:
        c.send(_request(7, X[0]))
        r = c.recv()
        out.append(CheckResult("round trip", r.get("id") == 7 and isinstance(r.get("label"), int), str(r)))

        c.send(b"{not json\n")
        r = c.recv()
        parse_ok = r == {"id": None, "error": "parse"}
        c.send(_request(8, X[1]))
        r2 = c.recv()
        out.append(CheckResult("malformed line keeps connection", parse_ok and r2.get("id") == 8,
                               f"{r} then {r2}"))

        c.send(_request(9, X[2][:-1]))
        r = c.recv()
        out.append(CheckResult("wrong length rejected", r.get("id") == 9 and "error" in r, str(r)))

        ids = [int(i) for i in rng.permutation(50) + 100]
        c.send(b"".join(_request(i, X[i - 100]) for i in ids))
        got = {}
        for _ in ids:
            r = c.recv()
            got[r["id"]] = r.get("label")
        out.append(CheckResult("pipelined ids all answered", sorted(got) == sorted(ids)))
    finally:
        c.close()

    with RemoteOracle(host, port) as direct:
        t0 = time.perf_counter()
        labels = direct.query_batch(X)
        elapsed = time.perf_counter() - t0
        single = [direct.query(X[i]) for i in range(min(20, queries))]
    out.append(CheckResult(f"{queries} queries under {time_limit:g}s", elapsed < time_limit,
                           f"{elapsed:.3f}s"))
    out.append(CheckResult("single and batched labels agree", single == labels[:len(single)].tolist()))

    proxy = ReversingProxy(host, port)
    try:
        with RemoteOracle("127.0.0.1", proxy.port, chunk=64) as shuffled:
            again = shuffled.query_batch(X[:256])
        out.append(CheckResult("out-of-order responses matched by id",
                               np.array_equal(again, labels[:256]) and proxy.reordered > 0,
                               f"{proxy.reordered} responses reordered"))
    finally:
        proxy.close()
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m nullnet.conformance")
    ap.add_argument("address", help="HOST:PORT of a running oracle")
    ap.add_argument("--dim", type=int, required=True, help="input length expected by the oracle")
    ap.add_argument("--queries", type=int, default=1000)
    args = ap.parse_args(argv)
    host, port = parse_address(args.address)
    results = run_checks(host, port, args.dim, args.queries)
    for r in results:
        print(r.line())
    return sum(not r.passed for r in results)


if __name__ == "__main__":
    sys.exit(main())
