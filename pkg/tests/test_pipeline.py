import json
import logging
import math
import os
import threading
import time

import numpy as np
import pytest

from dreamweave.dim import encode_png, load_stack
from dreamweave.generator import GenerationRequest, GeneratorError, StubGenerator
from dreamweave.pipeline import (BrokerError, BrokerServer, BrokerUnreachableError, DataStore, InProcessBroker,
                                 JobEnvelope, KillSwitch, RpcTimeoutError, StoreConflictError, StoreKey, TaskConfig,
                                 TcpBroker, WorkerGroup, connect_broker, n_weave_jobs, rpc_generate, rpc_weaver,
                                 run_offline_batch, run_onpolicy_loop, segments, weaver_worker)
from dreamweave.pipeline.workers import weave_payload

SMALL = dict(width=32, height=18, lease_s=0.3, poll_s=0.01)


def env(job_id, payload=b"x", kind="weave"):
    return JobEnvelope(job_id, kind, payload)


@pytest.fixture(params=["inprocess", "tcp"])
def broker(request):
    if request.param == "inprocess":
        yield InProcessBroker()
        return
    server = BrokerServer().start()
    client = TcpBroker(server.address)
    yield client
    client.close()
    server.stop()


# -- broker --------------------------------------------------------------------

def test_enqueue_dequeue(broker):
    assert broker.enqueue("q", env("a", b"\x00payload\xff"))
    job = broker.dequeue("q", "w1", lease=5)
    assert job.payload == b"\x00payload\xff" and job.attempt == 1 and job.kind == "weave"
    assert job.enqueued_at > 0
    assert broker.dequeue("q", "w1") is None


def test_lease_expiry_redelivers(broker):
    broker.enqueue("q", env("a"))
    assert broker.dequeue("q", "w1", lease=0.1).attempt == 1
    assert broker.dequeue("q", "w2", lease=0.1) is None
    time.sleep(0.15)
    again = broker.dequeue("q", "w2", lease=5)
    assert again.job_id == "a" and again.attempt == 2


def test_blocking_dequeue_wakes_on_expiry(broker):
    broker.enqueue("q", env("a"))
    broker.dequeue("q", "w1", lease=0.1)
    t0 = time.monotonic()
    job = broker.dequeue("q", "w2", lease=5, wait=2.0)
    assert job.attempt == 2 and time.monotonic() - t0 < 1.0


def test_ack_is_idempotent(broker, caplog):
    broker.enqueue("q", env("a"))
    job = broker.dequeue("q", "w")
    assert broker.ack("q", job.job_id) is True
    assert broker.ack("q", job.job_id) is False
    with caplog.at_level(logging.WARNING):
        assert broker.ack("q", "never-seen") is False
    assert broker.stats("q") == {"ready": 0, "leased": 0, "acked": 1, "parked": 0}


def test_poison_job_is_parked(broker):
    broker.enqueue("q", env("bad"))
    attempts = []
    for _ in range(5):
        job = broker.dequeue("q", "w")
        attempts.append(job.attempt)
        broker.nack("q", job.job_id)
    assert attempts == [1, 2, 3, 4, 5]
    assert broker.dequeue("q", "w") is None
    assert broker.parked("q") == ["bad"]
    # a late ack moves the job out of the parked set; it is never both
    assert broker.ack("q", "bad") is True
    assert broker.parked("q") == [] and broker.stats("q")["acked"] == 1


def test_duplicate_enqueue(broker):
    assert broker.enqueue("q", env("a", b"1"))
    assert not broker.enqueue("q", env("a", b"1"))
    with pytest.raises(BrokerError):
        broker.enqueue("q", env("a", b"2"))
    assert broker.stats("q")["ready"] == 1


def test_dequeue_wait_times_out(broker):
    t0 = time.monotonic()
    assert broker.dequeue("empty", "w", wait=0.2) is None
    assert 0.18 <= time.monotonic() - t0 < 1.0


def test_envelope_validation():
    with pytest.raises(ValueError):
        JobEnvelope("a", "render", b"")
    with pytest.raises(ValueError):
        JobEnvelope("a", "weave", b"", attempt=0)


def test_tcp_unreachable():
    with pytest.raises(BrokerUnreachableError):
        TcpBroker("127.0.0.1:9").ping()


def test_tcp_rejects_other_versions():
    import socket
    server = BrokerServer().start()
    try:
        host, port = server.server_address[:2]
        with socket.create_connection((host, port)) as s:
            s.sendall(b'{"v": 2, "op": "ping"}\n')
            reply = json.loads(s.makefile("rb").readline())
        assert reply["ok"] is False and "version" in reply["error"]
    finally:
        server.stop()


def test_connect_broker_from_environment(monkeypatch):
    monkeypatch.delenv("DREAMWEAVE_BROKER", raising=False)
    assert isinstance(connect_broker(), InProcessBroker)
    monkeypatch.setenv("DREAMWEAVE_BROKER", "127.0.0.1:5555")
    b = connect_broker()
    assert isinstance(b, TcpBroker) and b.port == 5555


def test_broker_is_linearizable_under_contention():
    b = InProcessBroker()
    for i in range(500):
        b.enqueue("q", env(f"j{i}"))
    got, lock = [], threading.Lock()

    def consume():
        while (job := b.dequeue("q", "w", lease=60)) is not None:
            with lock:
                got.append(job.job_id)
            b.ack("q", job.job_id)

    threads = [threading.Thread(target=consume) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(got) == sorted(f"j{i}" for i in range(500))
    assert b.stats("q")["acked"] == 500


# -- store ---------------------------------------------------------------------

KEY = StoreKey("stairs", "s1", "traj00000", "stack0000", "ab12")


def test_store_put_get(fast_tmp):
    store = DataStore(fast_tmp)
    store.put(KEY, {"a.bin": b"1", "b.bin": b"22"})
    assert store.get(KEY) == {"a.bin": b"1", "b.bin": b"22"}
    assert store.get(KEY, "b.bin") == b"22"
    assert list(store.keys()) == [KEY]
    assert store.path(KEY) == DataStore(fast_tmp).root / "stairs/s1/traj00000/stack0000/ab12"


def test_store_is_write_once(fast_tmp):
    store = DataStore(fast_tmp)
    store.put(KEY, {"a.bin": b"1"})
    before = store.digest()
    store.put(KEY, {"a.bin": b"1"})
    assert store.digest() == before
    with pytest.raises(StoreConflictError):
        store.put(KEY, {"a.bin": b"2"})
    assert store.get(KEY, "a.bin") == b"1"


def test_store_digest_tracks_content(fast_tmp, tmp_path):
    a, b = DataStore(os.path.join(fast_tmp, "a")), DataStore(tmp_path / "b")
    a.put(KEY, {"x": b"1"})
    b.put(KEY, {"x": b"1"})
    assert a.digest() == b.digest()
    b.put(KEY, {"y": b""})
    assert a.digest() != b.digest()


def test_store_concurrent_identical_writes(fast_tmp):
    store = DataStore(fast_tmp)
    errors = []

    def write():
        try:
            for i in range(50):
                store.put(KEY, {f"f{i}.bin": bytes([i]) * 1000})
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=write) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(store.get(KEY)) == 50
    assert not [p for p in store.path(KEY).iterdir() if p.name.startswith(".")]


def test_store_rejects_bad_segments(fast_tmp):
    with pytest.raises(ValueError):
        StoreKey("a", "..", "t", "s", "d")
    with pytest.raises(ValueError):
        StoreKey("a/b", "s", "t", "s", "d")
    with pytest.raises(ValueError):
        DataStore(fast_tmp).put(KEY, {"../escape": b""})


def test_store_downsize(fast_tmp):
    store = DataStore(fast_tmp, downsize=(8, 4))
    img = np.zeros((18, 32, 3), np.uint8)
    store.put(KEY, {"keyframe.png": encode_png(img), "labels_00.png": encode_png(img[..., 0])})
    from PIL import Image
    import io
    assert Image.open(io.BytesIO(store.get(KEY, "keyframe.png"))).size == (8, 4)
    assert Image.open(io.BytesIO(store.get(KEY, "labels_00.png"))).size == (32, 18)


def test_store_root_from_environment(monkeypatch, fast_tmp):
    monkeypatch.setenv("DREAMWEAVE_STORE", fast_tmp)
    assert str(DataStore().root) == fast_tmp
    monkeypatch.delenv("DREAMWEAVE_STORE")
    with pytest.raises(ValueError):
        DataStore()


# -- weavers -------------------------------------------------------------------

def stub_jobs(n, shape=(9, 16)):
    rng = np.random.default_rng(0)
    jobs = []
    for i in range(n):
        d = rng.random(shape)
        req = GenerationRequest(d, [(d > 0.5, f"fg {i}"), (d <= 0.5, "bg")], seed=i)
        key = StoreKey("t", "s", f"traj{i:05d}", "stack0000", req.digest())
        jobs.append((JobEnvelope(f"job{i}", "weave", weave_payload(key, req)), key, req))
    return jobs


def run_weavers(broker, store, jobs, n_workers=4, kill=None, generator=None):
    for job, _, _ in jobs:
        broker.enqueue("weave", job)
    counts = []
    group = WorkerGroup("w", n_workers, lambda wid, stop: counts.append(
        weaver_worker(broker, generator or StubGenerator(), store, worker_id=wid, stop=stop, lease=0.2,
                      poll=0.01, kill=kill)))
    with group:
        assert broker.wait_idle("weave", timeout=60)
    return counts, group


def test_weavers_store_every_job_once(fast_tmp):
    broker, store = InProcessBroker(), DataStore(fast_tmp)
    jobs = stub_jobs(100)
    counts, _ = run_weavers(broker, store, jobs)
    assert sum(counts) == 100
    assert broker.stats("weave") == {"ready": 0, "leased": 0, "acked": 100, "parked": 0}
    for _, key, req in jobs:
        from dreamweave.pipeline.workers import decode_png
        assert np.array_equal(decode_png(store.get(key, "keyframe.png")), StubGenerator().generate(req).rgb)


def test_killed_workers_leave_identical_store(fast_tmp):
    jobs = stub_jobs(60)
    clean = DataStore(os.path.join(fast_tmp, "clean"))
    run_weavers(InProcessBroker(), clean, jobs)
    broker, crashy = InProcessBroker(), DataStore(os.path.join(fast_tmp, "crashy"))
    _, group = run_weavers(broker, crashy, jobs, kill=KillSwitch(0.3, seed=5))
    assert group.kills > 0 and broker.parked("weave") == []
    assert crashy.digest() == clean.digest()


def test_idle_workers_poll_quietly():
    broker = InProcessBroker()
    group = WorkerGroup("idle", 2, lambda wid, stop: weaver_worker(broker, StubGenerator(), None, worker_id=wid,
                                                                  stop=stop, poll=0.01))
    with group:
        time.sleep(0.1)
    assert group.crashes == 0 and group.kills == 0


class AlwaysFails:
    def generate(self, request):
        raise GeneratorError("model fell over")


def test_failing_generation_parks_after_retries(fast_tmp):
    broker, store = InProcessBroker(), DataStore(fast_tmp)
    run_weavers(broker, store, stub_jobs(3), n_workers=2, generator=AlwaysFails())
    assert broker.parked("weave") == ["job0", "job1", "job2"]
    assert list(store.keys()) == []


def test_kill_switch_is_deterministic():
    k = KillSwitch(0.1, seed=3)
    draws = [k.stage(f"j{i}", 1) for i in range(5000)]
    assert draws == [k.stage(f"j{i}", 1) for i in range(5000)]
    rate = np.mean([d is not None for d in draws])
    assert 0.08 < rate < 0.12
    assert {d for d in draws if d} == set(KillSwitch.STAGES)
    assert KillSwitch(0.0).stage("j", 1) is None


# -- offline batch ---------------------------------------------------------------

def test_segment_arithmetic():
    for T in (1, 6, 7, 8, 20, 600):
        segs = segments(T)
        assert len(segs) == n_weave_jobs(T) == math.ceil(T / 7)
        assert segs[0][0] == 0 and segs[-1][1] == T
        assert all(b - a == 7 for a, b in segs[:-1]) and 1 <= segs[-1][1] - segs[-1][0] <= 7


def test_offline_batch_counts(fast_tmp):
    cfg = TaskConfig(n_trajectories=10, timesteps=14, **SMALL)
    store = DataStore(fast_tmp)
    report = run_offline_batch(cfg, InProcessBroker(), store)
    assert (report.weave_jobs, report.stacks_stored, report.frames_stored) == (20, 20, 140)
    assert report.ok and 0 <= report.mean_hole_fraction < 0.5 and report.wall_time_s > 0
    key = next(store.keys())
    names = set(store.get(key))
    assert {"keyframe.png", "request.json", "manifest.json", "depth_00.dwd", "labels_06.png", "flow_06.dwf",
            "frame_06.png", "holes_06.png"} <= names
    assert "flow_00.dwf" not in names
    stack = load_stack(store.path(key))
    assert len(stack) == 7 and stack.provenance["digest"] == key.digest


def test_offline_batch_partial_last_stack(fast_tmp):
    cfg = TaskConfig(n_trajectories=2, timesteps=9, **SMALL)
    report = run_offline_batch(cfg, InProcessBroker(), DataStore(fast_tmp))
    assert report.weave_jobs == 4 and report.frames_stored == 18


def test_offline_batch_zero_trajectories(fast_tmp):
    report = run_offline_batch(TaskConfig(n_trajectories=0), InProcessBroker(), DataStore(fast_tmp))
    assert report.ok and report.stacks_stored == 0 and report.weave_jobs == 0


def test_offline_batch_over_tcp(fast_tmp):
    server = BrokerServer().start()
    try:
        cfg = TaskConfig(n_trajectories=3, timesteps=7, **SMALL)
        report = run_offline_batch(cfg, TcpBroker(server.address), DataStore(fast_tmp))
        assert report.stacks_stored == 3
        tcp_digest = DataStore(fast_tmp).digest()
    finally:
        server.stop()
    local = DataStore(os.path.join(fast_tmp, "..", os.path.basename(fast_tmp) + "-local"))
    try:
        run_offline_batch(cfg, InProcessBroker(), local)
        assert local.digest() == tcp_digest
    finally:
        import shutil
        shutil.rmtree(local.root, ignore_errors=True)


def test_task_config_round_trip():
    cfg = TaskConfig(task="hurdles", n_trajectories=3)
    assert TaskConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        TaskConfig.from_dict({"bogus": 1})


# -- RPC and on-policy -------------------------------------------------------------

@pytest.fixture
def rpc_pool():
    broker = InProcessBroker()
    groups = []

    def start(n=1, generator=None):
        g = WorkerGroup("rpc", n, lambda wid, stop: rpc_weaver(broker, generator or StubGenerator(),
                                                                worker_id=wid, stop=stop, poll=0.01))
        groups.append(g.start())
        return broker

    yield start
    for g in groups:
        g.stop()


def test_rpc_matches_direct_call(rpc_pool):
    broker = rpc_pool()
    req = stub_jobs(1)[0][2]
    out = rpc_generate(broker, req, deadline=5)
    assert out.request_digest == req.digest()
    assert out.rgb.tobytes() == StubGenerator().generate(req).rgb.tobytes()


def test_rpc_two_callers_get_their_own_replies(rpc_pool):
    broker = rpc_pool(2)
    reqs = [r for _, _, r in stub_jobs(40)]
    results = {}

    def call(idx):
        for i in idx:
            results[i] = rpc_generate(broker, reqs[i], deadline=5)

    threads = [threading.Thread(target=call, args=(range(k, 40, 2),)) for k in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i, r in results.items():
        assert r.request_digest == reqs[i].digest()
        assert np.array_equal(r.rgb, StubGenerator().generate(reqs[i]).rgb)


def test_rpc_without_workers_times_out():
    broker = InProcessBroker()
    t0 = time.monotonic()
    with pytest.raises(RpcTimeoutError):
        rpc_generate(broker, stub_jobs(1)[0][2], deadline=0.3)
    assert 0.28 <= time.monotonic() - t0 < 0.8


def test_expired_rpc_jobs_are_skipped(rpc_pool):
    broker = InProcessBroker()
    req = stub_jobs(1)[0][2]
    with pytest.raises(RpcTimeoutError):
        rpc_generate(broker, req, deadline=0.05, reply_queue="replies")
    stop = threading.Event()
    t = threading.Thread(target=rpc_weaver, args=(broker, StubGenerator()), kwargs={"stop": stop, "poll": 0.01})
    t.start()
    assert broker.wait_idle("weave.rpc", timeout=5)
    stop.set()
    t.join()
    assert broker.stats("replies")["ready"] == 0


class SlowOnCall:
    """Stub generator that stalls on chosen call numbers (1-based)."""

    def __init__(self, slow_calls, delay):
        self.slow_calls, self.delay = set(slow_calls), delay
        self.calls = 0
        self.lock = threading.Lock()
        self.inner = StubGenerator()

    def generate(self, request):
        with self.lock:
            self.calls += 1
            n = self.calls
        if n in self.slow_calls:
            time.sleep(self.delay)
        return self.inner.generate(request)


def test_onpolicy_segments(rpc_pool, fast_tmp):
    broker = rpc_pool(1)
    cfg = TaskConfig(n_trajectories=1, timesteps=21, **SMALL)
    store = DataStore(fast_tmp)
    report = run_onpolicy_loop(cfg, broker, store, rpc_deadline_s=5)
    assert (report.rpc_calls, report.stacks_stored, report.flagged, report.mismatches) == (3, 3, [], 0)
    assert [len(load_stack(store.path(k))) for k in store.keys()] == [7, 7, 7]


def test_onpolicy_timeout_flags_one_segment(rpc_pool, fast_tmp):
    broker = rpc_pool(2, SlowOnCall({2}, delay=1.0))
    cfg = TaskConfig(n_trajectories=1, timesteps=21, **SMALL)
    store = DataStore(fast_tmp)
    report = run_onpolicy_loop(cfg, broker, store, rpc_deadline_s=0.4)
    assert report.rpc_calls == 3 and report.stacks_stored == 2
    assert [f["segment"] for f in report.flagged] == [1]
    assert sorted(k.stack for k in store.keys()) == ["stack0000", "stack0002"]
    assert report.mismatches == 0


def test_onpolicy_single_step(rpc_pool, fast_tmp):
    broker = rpc_pool(1)
    cfg = TaskConfig(n_trajectories=1, timesteps=1, **SMALL)
    store = DataStore(fast_tmp)
    report = run_onpolicy_loop(cfg, broker, store, rpc_deadline_s=5)
    assert report.rpc_calls == 1 and report.stacks_stored == 1
    stack = load_stack(store.path(next(store.keys())))
    assert len(stack) == 1 and stack.timestamps_ms == [0]


def test_onpolicy_over_tcp(fast_tmp):
    server = BrokerServer().start()
    stop = threading.Event()
    weaver = threading.Thread(target=rpc_weaver, args=(TcpBroker(server.address), StubGenerator()),
                              kwargs={"stop": stop, "poll": 0.05})
    weaver.start()
    try:
        cfg = TaskConfig(n_trajectories=2, timesteps=8, **SMALL)
        report = run_onpolicy_loop(cfg, TcpBroker(server.address), DataStore(fast_tmp), rpc_deadline_s=5)
        assert report.rpc_calls == 4 and report.stacks_stored == 4 and report.mismatches == 0
    finally:
        stop.set()
        weaver.join()
        server.stop()
