"""Weaver workers, RPC over the broker, and a supervisor that respawns dead workers."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image

from ..dim import encode_png
from ..generator import GeneratedImage, GenerationRequest, GeneratorError, decode_rgb, encode_rgb
from .broker import BrokerUnreachableError, JobEnvelope
from .store import DataStore, StoreKey

log = logging.getLogger(__name__)

RPC_QUEUE = "weave.rpc"
DEFAULT_POLL_S = 0.05


class WorkerKilled(BaseException):
    """Raised inside a worker to simulate the process dying; deliberately not an Exception."""


@dataclass(frozen=True)
class KillSwitch:
    """Deterministic fault injection: kill with ``probability`` per (job, attempt).

    The stage at which the worker dies is also drawn from the hash, so some
    kills happen before any work, some after a partial upload and some after
    the upload but before the ack.
    """

    probability: float
    seed: int = 0

    STAGES = ("start", "partial", "before_ack")

    def stage(self, job_id: str, attempt: int) -> str | None:
        if self.probability <= 0:
            return None
        h = hashlib.sha256(f"{self.seed}:{job_id}:{attempt}".encode()).digest()
        if int.from_bytes(h[:8], "big") / 2.0**64 >= self.probability:
            return None
        return self.STAGES[h[8] % len(self.STAGES)]

    def check(self, job: JobEnvelope, stage: str) -> None:
        if self.stage(job.job_id, job.attempt) == stage:
            raise WorkerKilled(f"{job.job_id} attempt {job.attempt} at {stage}")


def _maybe_kill(kill: KillSwitch | None, job: JobEnvelope, stage: str) -> None:
    if kill is not None:
        kill.check(job, stage)


class WorkerGroup:
    """``n`` worker threads running ``target(worker_id, stop_event)``; dead workers are replaced."""

    def __init__(self, name: str, n: int, target: Callable[[str, threading.Event], None],
                 check_every: float = 0.01):
        self.name, self.n, self.target = name, n, target
        self.check_every = check_every
        self.stop_event = threading.Event()
        self.kills = 0
        self.crashes = 0
        self._threads: list[threading.Thread | None] = [None] * n
        self._spawned = 0
        self._monitor: threading.Thread | None = None

    def _run(self, worker_id: str) -> None:
        try:
            self.target(worker_id, self.stop_event)
        except WorkerKilled as k:
            log.info("worker %s killed: %s", worker_id, k)
            self.kills += 1
        except Exception:
            log.exception("worker %s crashed", worker_id)
            self.crashes += 1

    def _spawn(self, slot: int) -> None:
        self._spawned += 1
        wid = f"{self.name}-{slot}.{self._spawned}"
        t = threading.Thread(target=self._run, args=(wid,), name=wid, daemon=True)
        self._threads[slot] = t
        t.start()

    def _watch(self) -> None:
        while not self.stop_event.wait(self.check_every):
            for slot, t in enumerate(self._threads):
                if t is not None and not t.is_alive():
                    self._spawn(slot)

    def start(self) -> "WorkerGroup":
        for slot in range(self.n):
            self._spawn(slot)
        self._monitor = threading.Thread(target=self._watch, name=f"{self.name}-monitor", daemon=True)
        self._monitor.start()
        return self

    def stop(self, timeout: float = 10.0) -> None:
        self.stop_event.set()
        if self._monitor is not None:
            self._monitor.join(timeout)
        for t in self._threads:
            if t is not None:
                t.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def weave_payload(key: StoreKey, request: GenerationRequest) -> bytes:
    return json.dumps({"key": key.to_dict(), "request": request.to_wire()}, sort_keys=True).encode()


def decode_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def weaver_worker(broker, generator, store: DataStore, *, queue: str = "weave", worker_id: str = "weaver",
                  stop: threading.Event | None = None, lease: float = 30.0, poll: float = DEFAULT_POLL_S,
                  kill: KillSwitch | None = None, max_jobs: int | None = None) -> int:
    """Consume weave jobs until ``stop`` is set; returns the number of jobs acked by this worker."""
    stop = stop or threading.Event()
    done = 0
    while not stop.is_set() and (max_jobs is None or done < max_jobs):
        try:
            job = broker.dequeue(queue, worker_id, lease=lease, wait=poll)
        except BrokerUnreachableError:
            log.warning("%s: broker unreachable, retrying", worker_id)
            time.sleep(poll)
            continue
        if job is None:
            continue
        _maybe_kill(kill, job, "start")
        body = json.loads(job.payload)
        key = StoreKey.from_dict(body["key"])
        try:
            result = generator.generate(GenerationRequest.from_wire(body["request"]))
        except GeneratorError as exc:
            log.warning("%s: generation failed for %s (attempt %d): %s", worker_id, job.job_id, job.attempt, exc)
            broker.nack(queue, job.job_id)
            continue
        png = encode_png(result.rgb)
        if kill is not None and kill.stage(job.job_id, job.attempt) == "partial":
            # die halfway through the upload: leave a stray temp file behind, like a real crash would
            d = store.path(key)
            d.mkdir(parents=True, exist_ok=True)
            (d / f".keyframe.png.{worker_id}.tmp").write_bytes(png[: len(png) // 2])
            raise WorkerKilled(f"{job.job_id} during upload")
        store.put(key, {"keyframe.png": png})
        _maybe_kill(kill, job, "before_ack")
        if broker.ack(queue, job.job_id):
            done += 1
    return done


# -- RPC -----------------------------------------------------------------------

class RpcTimeoutError(TimeoutError):
    pass


class RpcError(RuntimeError):
    pass


def _reply_payload(correlation_id: str, image: GeneratedImage) -> bytes:
    return json.dumps({"correlation_id": correlation_id, "request_digest": image.request_digest,
                       "generator": image.generator, "latency_ms": image.latency_ms,
                       "image": encode_rgb(image.rgb)}).encode()


def rpc_weaver(broker, generator, *, queue: str = RPC_QUEUE, worker_id: str = "rpc-weaver",
               stop: threading.Event | None = None, lease: float = 30.0, poll: float = DEFAULT_POLL_S,
               kill: KillSwitch | None = None) -> int:
    """Serve RPC generation requests; replies go to each call's ``reply_to`` queue."""
    stop = stop or threading.Event()
    served = 0
    while not stop.is_set():
        job = broker.dequeue(queue, worker_id, lease=lease, wait=poll)
        if job is None:
            continue
        _maybe_kill(kill, job, "start")
        if job.deadline is not None and time.time() > job.deadline:
            log.info("%s: dropping %s, deadline already passed", worker_id, job.correlation_id)
            broker.ack(queue, job.job_id)
            continue
        try:
            image = generator.generate(GenerationRequest.from_bytes(job.payload))
        except GeneratorError as exc:
            log.warning("%s: rpc generation failed: %s", worker_id, exc)
            broker.nack(queue, job.job_id)
            continue
        reply = JobEnvelope(f"reply-{job.correlation_id}-{job.attempt}", "weave",
                            _reply_payload(job.correlation_id, image), correlation_id=job.correlation_id)
        broker.enqueue(job.reply_to, reply)
        _maybe_kill(kill, job, "before_ack")
        broker.ack(queue, job.job_id)
        served += 1
    return served


def new_reply_queue() -> str:
    return f"reply.{uuid.uuid4().hex}"


def rpc_generate(broker, request: GenerationRequest, deadline: float, *, queue: str = RPC_QUEUE,
                 reply_queue: str | None = None) -> GeneratedImage:
    """Send ``request`` to the RPC weavers and block up to ``deadline`` seconds for the matching reply."""
    correlation_id = uuid.uuid4().hex
    reply_queue = reply_queue or new_reply_queue()
    expires = time.time() + deadline
    payload = request.to_bytes()
    digest = request.digest()
    broker.enqueue(queue, JobEnvelope(correlation_id, "weave", payload, correlation_id=correlation_id,
                                      reply_to=reply_queue, deadline=expires))
    while True:
        remaining = expires - time.time()
        if remaining <= 0:
            raise RpcTimeoutError(f"no reply for {correlation_id} within {deadline:.3f} s")
        env = broker.dequeue(reply_queue, "caller", lease=60.0, wait=remaining)
        if env is None:
            continue
        broker.ack(reply_queue, env.job_id)
        body = json.loads(env.payload)
        if body["correlation_id"] != correlation_id:
            log.debug("discarding stale reply %s", body["correlation_id"])
            continue
        if body["request_digest"] != digest:
            raise RpcError(f"reply for {correlation_id} carries digest {body['request_digest']}, expected {digest}")
        return GeneratedImage(decode_rgb(body["image"]), body["request_digest"], body["generator"],
                              body["latency_ms"])
