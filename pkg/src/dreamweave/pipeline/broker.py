"""Job broker with lease-based redelivery.

Two implementations share one interface: ``InProcessBroker`` (threads in one
process) and ``TcpBroker``, a client for ``BrokerServer``.

Delivery is at-least-once. A dequeued job is leased to one worker; if it is
not acked before the lease runs out it becomes visible again with ``attempt``
incremented. A job whose next attempt would exceed ``max_attempts`` is parked
instead and stays parked unless it is acked later.

TCP protocol, version 1: one JSON object per line in each direction.

Request fields: ``v`` (always 1), ``op``, ``queue`` and per-op arguments
``job_id``, ``kind``, ``payload_b64``, ``lease_s``, ``wait_s``, ``worker_id``,
``correlation_id``, ``reply_to``, ``deadline``.
Ops: ``enqueue``, ``dequeue``, ``ack``, ``nack``, ``stats``, ``parked``, ``ping``.

Response: ``{"ok": true, "result": ...}`` or ``{"ok": false, "error": str}``.
A dequeue result is an envelope object (same field names as the request) or null.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_ATTEMPTS = 5
DEFAULT_LEASE_S = 30.0
BROKER_ENV = "DREAMWEAVE_BROKER"
KINDS = ("unroll", "weave")


class BrokerError(RuntimeError):
    pass


class BrokerUnreachableError(BrokerError):
    pass


@dataclass(frozen=True)
class JobEnvelope:
    job_id: str
    kind: str
    payload: bytes
    attempt: int = 1
    enqueued_at: float = 0.0
    correlation_id: Optional[str] = None
    reply_to: Optional[str] = None
    deadline: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown job kind {self.kind!r}")
        if self.attempt < 1:
            raise ValueError("attempt must be >= 1")

    def to_wire(self) -> dict:
        return {
            "job_id": self.job_id, "kind": self.kind,
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "attempt": self.attempt, "enqueued_at": self.enqueued_at,
            "correlation_id": self.correlation_id, "reply_to": self.reply_to, "deadline": self.deadline,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "JobEnvelope":
        return cls(obj["job_id"], obj["kind"], base64.b64decode(obj["payload_b64"]), obj.get("attempt", 1),
                   obj.get("enqueued_at", 0.0), obj.get("correlation_id"), obj.get("reply_to"),
                   obj.get("deadline"))


class _Queue:
    def __init__(self):
        self.jobs: dict[str, JobEnvelope] = {}
        self.ready: deque[str] = deque()
        self.leases: dict[str, tuple[float, str]] = {}  # job_id -> (expiry, worker)
        self.acked: set[str] = set()
        self.parked: dict[str, JobEnvelope] = {}


class InProcessBroker:
    """Thread-safe broker; every operation holds one lock, so each queue is linearizable."""

    def __init__(self, max_attempts: int = MAX_ATTEMPTS, clock=time.monotonic):
        self.max_attempts = max_attempts
        self._clock = clock
        self._queues: dict[str, _Queue] = {}
        self._cond = threading.Condition()

    def _q(self, name: str) -> _Queue:
        q = self._queues.get(name)
        if q is None:
            q = self._queues[name] = _Queue()
        return q

    def enqueue(self, queue: str, envelope: JobEnvelope) -> bool:
        """Add a job. Re-enqueueing an identical job is a no-op returning False."""
        with self._cond:
            q = self._q(queue)
            old = q.jobs.get(envelope.job_id) or q.parked.get(envelope.job_id)
            if old is not None or envelope.job_id in q.acked:
                if old is not None and old.payload != envelope.payload:
                    raise BrokerError(f"job id {envelope.job_id!r} reused with a different payload")
                return False
            env = replace(envelope, attempt=1, enqueued_at=envelope.enqueued_at or time.time())
            q.jobs[env.job_id] = env
            q.ready.append(env.job_id)
            self._cond.notify_all()
            return True

    def _expire(self, q: _Queue, now: float) -> None:
        for job_id, (expiry, worker) in list(q.leases.items()):
            if expiry <= now:
                del q.leases[job_id]
                self._redeliver(q, job_id, f"lease held by {worker} expired")

    def _redeliver(self, q: _Queue, job_id: str, why: str) -> None:
        env = q.jobs[job_id]
        if env.attempt >= self.max_attempts:
            del q.jobs[job_id]
            q.parked[job_id] = env
            log.warning("parking job %s after %d attempts (%s)", job_id, env.attempt, why)
            return
        q.jobs[job_id] = replace(env, attempt=env.attempt + 1)
        q.ready.append(job_id)
        self._cond.notify_all()

    def _next_expiry(self, q: _Queue) -> float | None:
        return min((e for e, _ in q.leases.values()), default=None)

    def dequeue(self, queue: str, worker_id: str = "", lease: float = DEFAULT_LEASE_S,
                wait: float = 0.0) -> JobEnvelope | None:
        end = self._clock() + max(wait, 0.0)
        with self._cond:
            q = self._q(queue)
            while True:
                now = self._clock()
                self._expire(q, now)
                if q.ready:
                    job_id = q.ready.popleft()
                    q.leases[job_id] = (now + lease, worker_id)
                    return q.jobs[job_id]
                if now >= end:
                    return None
                timeout = end - now
                nxt = self._next_expiry(q)
                if nxt is not None:
                    timeout = min(timeout, max(nxt - now, 0.0) + 1e-4)
                self._cond.wait(timeout)

    def ack(self, queue: str, job_id: str) -> bool:
        """Mark done. Returns False (and changes nothing) for repeated or unknown ids."""
        with self._cond:
            q = self._q(queue)
            if job_id in q.acked:
                return False
            if job_id in q.parked:
                del q.parked[job_id]
            elif job_id in q.jobs:
                del q.jobs[job_id]
                q.leases.pop(job_id, None)
                try:
                    q.ready.remove(job_id)
                except ValueError:
                    pass
            else:
                log.warning("ack for unknown job %s on queue %s ignored", job_id, queue)
                return False
            q.acked.add(job_id)
            self._cond.notify_all()
            return True

    def nack(self, queue: str, job_id: str) -> bool:
        """Give a leased job back early; it is redelivered (or parked) right away."""
        with self._cond:
            q = self._q(queue)
            if q.leases.pop(job_id, None) is None:
                return False
            self._redeliver(q, job_id, "released by worker")
            return True

    def stats(self, queue: str) -> dict:
        with self._cond:
            q = self._q(queue)
            self._expire(q, self._clock())
            return {"ready": len(q.ready), "leased": len(q.leases), "acked": len(q.acked), "parked": len(q.parked)}

    def parked(self, queue: str) -> list[str]:
        with self._cond:
            return sorted(self._q(queue).parked)

    def wait_idle(self, queue: str, timeout: float | None = None, poll: float = 0.01) -> bool:
        """Block until nothing is ready or leased on ``queue``."""
        end = None if timeout is None else time.monotonic() + timeout
        while True:
            s = self.stats(queue)
            if s["ready"] == 0 and s["leased"] == 0:
                return True
            if end is not None and time.monotonic() >= end:
                return False
            time.sleep(poll)

    def close(self):
        pass


# -- TCP ---------------------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        broker: InProcessBroker = self.server.broker
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
                if msg.get("v") != PROTOCOL_VERSION:
                    raise BrokerError(f"unsupported protocol version {msg.get('v')!r}")
                out = {"ok": True, "result": _dispatch(broker, msg)}
            except Exception as exc:  # reported to the client, the connection stays usable
                out = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
            self.wfile.write(json.dumps(out).encode() + b"\n")
            self.wfile.flush()


def _dispatch(broker: InProcessBroker, msg: dict):
    op, queue = msg.get("op"), msg.get("queue", "")
    if op == "ping":
        return "pong"
    if op == "enqueue":
        return broker.enqueue(queue, JobEnvelope.from_wire(msg))
    if op == "dequeue":
        env = broker.dequeue(queue, msg.get("worker_id", ""), msg.get("lease_s", DEFAULT_LEASE_S),
                             msg.get("wait_s", 0.0))
        return None if env is None else env.to_wire()
    if op == "ack":
        return broker.ack(queue, msg["job_id"])
    if op == "nack":
        return broker.nack(queue, msg["job_id"])
    if op == "stats":
        return broker.stats(queue)
    if op == "parked":
        return broker.parked(queue)
    raise BrokerError(f"unknown op {op!r}")


class BrokerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address=("127.0.0.1", 0), broker: InProcessBroker | None = None):
        self.broker = broker or InProcessBroker()
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "BrokerServer":
        threading.Thread(target=self.serve_forever, name="broker-server", daemon=True).start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


class TcpBroker:
    """Client for ``BrokerServer``; one connection per calling thread."""

    def __init__(self, address: str, connect_timeout: float = 5.0):
        host, _, port = address.rpartition(":")
        self.host, self.port = host or "127.0.0.1", int(port)
        self.connect_timeout = connect_timeout
        self._local = threading.local()
        self._all: list[socket.socket] = []
        self._lock = threading.Lock()

    def _conn(self):
        conn = getattr(self._local, "conn", None)
        if conn is None:
            try:
                sock = socket.create_connection((self.host, self.port), timeout=self.connect_timeout)
            except OSError as exc:
                raise BrokerUnreachableError(f"broker at {self.host}:{self.port} unreachable: {exc}") from exc
            sock.settimeout(None)
            conn = self._local.conn = (sock, sock.makefile("rb"))
            with self._lock:
                self._all.append(sock)
        return conn

    def _call(self, op: str, queue: str = "", **fields):
        msg = {"v": PROTOCOL_VERSION, "op": op, "queue": queue, **fields}
        sock, rfile = self._conn()
        try:
            sock.sendall(json.dumps(msg).encode() + b"\n")
            line = rfile.readline()
        except OSError as exc:
            self._local.conn = None
            raise BrokerUnreachableError(f"lost connection to broker: {exc}") from exc
        if not line:
            self._local.conn = None
            raise BrokerUnreachableError("broker closed the connection")
        reply = json.loads(line)
        if not reply["ok"]:
            raise BrokerError(reply["error"])
        return reply["result"]

    def ping(self) -> bool:
        return self._call("ping") == "pong"

    def enqueue(self, queue: str, envelope: JobEnvelope) -> bool:
        return self._call("enqueue", queue, **envelope.to_wire())

    def dequeue(self, queue: str, worker_id: str = "", lease: float = DEFAULT_LEASE_S,
                wait: float = 0.0) -> JobEnvelope | None:
        obj = self._call("dequeue", queue, worker_id=worker_id, lease_s=lease, wait_s=wait)
        return None if obj is None else JobEnvelope.from_wire(obj)

    def ack(self, queue: str, job_id: str) -> bool:
        return self._call("ack", queue, job_id=job_id)

    def nack(self, queue: str, job_id: str) -> bool:
        return self._call("nack", queue, job_id=job_id)

    def stats(self, queue: str) -> dict:
        return self._call("stats", queue)

    def parked(self, queue: str) -> list[str]:
        return self._call("parked", queue)

    wait_idle = InProcessBroker.wait_idle

    def close(self):
        with self._lock:
            for sock in self._all:
                try:
                    sock.close()
                except OSError:
                    pass
            self._all.clear()
        self._local = threading.local()


def connect_broker(address: str | None = None):
    """``address`` (or $DREAMWEAVE_BROKER) is ``host:port``; empty or ``inprocess`` gives a local broker."""
    address = address if address is not None else os.environ.get(BROKER_ENV, "")
    if address in ("", "inprocess"):
        return InProcessBroker()
    return TcpBroker(address)
