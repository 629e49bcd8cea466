"""Offline batch generation and the on-policy RPC loop."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..camera import CameraIntrinsics, intrinsics_from_fov, normalize_disparity
from ..dim import STACK_LEN, assemble_stack, stack_files
from ..flow import compute_flow
from ..generator import StubGenerator, build_request
from ..prompts import PromptPool
from ..raster import depth_from_bytes, depth_to_bytes, flow_to_bytes, labels_to_png
from ..scene import TerrainSpec, build_terrain, raycast
from ..trajectory import sample_walk
from .broker import JobEnvelope
from .store import DataStore, StoreKey
from .workers import (KillSwitch, RpcTimeoutError, WorkerGroup, _maybe_kill, decode_png, new_reply_queue,
                      rpc_generate, weave_payload, weaver_worker)

log = logging.getLogger(__name__)

DEFAULT_FOREGROUND = "weathered concrete steps with chipped edges"
DEFAULT_BACKGROUND = "a quiet courtyard with stone walls under an overcast sky"


@dataclass
class TaskConfig:
    task: str = "stairs"
    scene: str = "default"
    terrain: TerrainSpec = field(default_factory=lambda: TerrainSpec(kind="stairs"))
    n_trajectories: int = 1000
    timesteps: int = 600
    width: int = 320
    height: int = 180
    fov_deg: float = 120.0
    near: float = 0.05
    far: float = 10.0
    seed: int = 0
    foreground: str = DEFAULT_FOREGROUND
    background: str = DEFAULT_BACKGROUND
    control_strength: float = 0.8
    diffusion_steps: int = 6
    fill: str = "nearest_valid"
    n_unroll_workers: int = 2
    n_weavers: int = 4
    lease_s: float = 30.0
    poll_s: float = 0.02
    upload_flow: bool = True

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return intrinsics_from_fov(self.fov_deg, self.width, self.height)

    @property
    def unroll_queue(self) -> str:
        return f"{self.task}.unroll"

    @property
    def weave_queue(self) -> str:
        return f"{self.task}.weave"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["terrain"] = self.terrain.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TaskConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown task config fields: {sorted(unknown)}")
        if "terrain" in data and not isinstance(data["terrain"], TerrainSpec):
            data["terrain"] = TerrainSpec.from_dict(data["terrain"])
        return cls(**data)


def segments(n_steps: int, stack_len: int = STACK_LEN) -> list[tuple[int, int]]:
    return [(s, min(s + stack_len, n_steps)) for s in range(0, n_steps, stack_len)]


def n_weave_jobs(n_steps: int, stack_len: int = STACK_LEN) -> int:
    return math.ceil(n_steps / stack_len)


def trajectory_poses(config: TaskConfig, index: int, scene=None):
    scene = scene if scene is not None else build_terrain(config.terrain)
    rng = np.random.default_rng([config.seed, index])
    return sample_walk(scene, config.timesteps, rng, lane_width=config.terrain.lane_width * 0.5)


def segment_seed(config: TaskConfig, trajectory: int, segment: int) -> int:
    h = hashlib.sha256(f"{config.seed}:{config.task}:{trajectory}:{segment}".encode()).digest()
    return int.from_bytes(h[:4], "big")


def _names(trajectory: int, segment: int) -> tuple[str, str]:
    return f"traj{trajectory:05d}", f"stack{segment:04d}"


def keyframe_request(config: TaskConfig, depth, labels, foreground: str, background: str, seed: int):
    return build_request(normalize_disparity(depth), labels, foreground, background,
                         foreground_labels=(config.terrain.labels["obstacle"],),
                         control_strength=config.control_strength, diffusion_steps=config.diffusion_steps, seed=seed)


# -- offline batch -------------------------------------------------------------

def unroll_worker(broker, store: DataStore, config: TaskConfig, *, worker_id: str = "unroll",
                  stop: threading.Event | None = None, kill: KillSwitch | None = None) -> int:
    """Render conditioning for whole trajectories and enqueue one weave job per stack."""
    stop = stop or threading.Event()
    scene = build_terrain(config.terrain)
    K = config.intrinsics
    done = 0
    while not stop.is_set():
        job = broker.dequeue(config.unroll_queue, worker_id, lease=config.lease_s, wait=config.poll_s)
        if job is None:
            continue
        _maybe_kill(kill, job, "start")
        spec = json.loads(job.payload)
        traj = spec["trajectory"]
        poses = trajectory_poses(config, traj, scene)
        segs = segments(len(poses))
        for s, (a, b) in enumerate(segs):
            renders = [raycast(scene, K, p, config.near, config.far) for p in poses[a:b]]
            depth0, labels0 = renders[0]
            request = keyframe_request(config, depth0, labels0, spec["foreground"], spec["background"],
                                       segment_seed(config, traj, s))
            key = StoreKey(config.task, config.scene, *_names(traj, s), request.digest())
            files = {"request.json": request.to_bytes()}
            for i, ((depth, labels), pose) in enumerate(zip(renders, poses[a:b])):
                files[f"depth_{i:02d}.dwd"] = depth_to_bytes(depth, pose, K)
                files[f"labels_{i:02d}.png"] = labels_to_png(labels)
                if config.upload_flow and i > 0:
                    flow = compute_flow(depth, pose, poses[a], K)
                    files[f"flow_{i:02d}.dwf"] = flow_to_bytes(flow, config.near, config.far, pose, K)
            store.put(key, files)
            if s == len(segs) // 2:
                _maybe_kill(kill, job, "partial")
            broker.enqueue(config.weave_queue, JobEnvelope(f"{key.trajectory}/{key.stack}", "weave",
                                                           weave_payload(key, request)))
        _maybe_kill(kill, job, "before_ack")
        if broker.ack(config.unroll_queue, job.job_id):
            done += 1
    return done


@dataclass
class BatchReport:
    task: str
    n_trajectories: int = 0
    unroll_jobs: int = 0
    weave_jobs: int = 0
    stacks_stored: int = 0
    frames_stored: int = 0
    mean_hole_fraction: float = 0.0
    wall_time_s: float = 0.0
    parked: list = field(default_factory=list)
    worker_kills: int = 0

    @property
    def ok(self) -> bool:
        return not self.parked

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _prompt_for(config: TaskConfig, pool: PromptPool | None, index: int) -> tuple[str, str]:
    if pool is None:
        return config.foreground, config.background
    pair = pool.sample(config.seed * 1_000_003 + index)
    return pair.foreground, pair.background


def assemble_stored_stacks(config: TaskConfig, store: DataStore) -> tuple[int, int, list[float]]:
    """Warp every stored keyframe into its stack and store the frames next to it."""
    K = config.intrinsics
    n_stacks = n_frames = 0
    fractions = []
    for key in store.keys():
        if key.task != config.task or key.scene != config.scene or not store.exists(key, "keyframe.png"):
            continue
        files = store.get(key)
        keyframe = decode_png(files["keyframe.png"])
        renders = []
        for i in range(STACK_LEN):
            name = f"depth_{i:02d}.dwd"
            if name not in files:
                break
            depth, pose, _ = depth_from_bytes(files[name])
            renders.append((depth, pose))
        stack = assemble_stack(keyframe, renders, K, fill=config.fill,
                               provenance={**key.to_dict(), "generator_seed": json.loads(
                                   files["request.json"])["seed"]})
        store.put(key, stack_files(stack))
        n_stacks += 1
        n_frames += len(stack)
        fractions.append(stack.hole_fraction)
    return n_stacks, n_frames, fractions


def run_offline_batch(config: TaskConfig, broker, store: DataStore, *, generator=None,
                      pool: PromptPool | None = None, kill: KillSwitch | None = None,
                      timeout_s: float | None = None) -> BatchReport:
    t0 = time.perf_counter()
    report = BatchReport(config.task, n_trajectories=config.n_trajectories)
    if config.n_trajectories == 0:
        return report
    generator = generator or StubGenerator()

    for i in range(config.n_trajectories):
        fg, bg = _prompt_for(config, pool, i)
        payload = json.dumps({"trajectory": i, "foreground": fg, "background": bg}, sort_keys=True).encode()
        broker.enqueue(config.unroll_queue, JobEnvelope(f"traj{i:05d}", "unroll", payload))
    report.unroll_jobs = config.n_trajectories

    unrollers = WorkerGroup(f"{config.task}-unroll", config.n_unroll_workers,
                            lambda wid, stop: unroll_worker(broker, store, config, worker_id=wid, stop=stop,
                                                            kill=kill))
    with unrollers:
        broker.wait_idle(config.unroll_queue, timeout_s)
    report.weave_jobs = sum(broker.stats(config.weave_queue).values())

    # the weave queue is populated once, after the whole batch is unrolled
    weavers = WorkerGroup(f"{config.task}-weaver", config.n_weavers,
                          lambda wid, stop: weaver_worker(broker, generator, store, queue=config.weave_queue,
                                                          worker_id=wid, stop=stop, lease=config.lease_s,
                                                          poll=config.poll_s, kill=kill))
    with weavers:
        broker.wait_idle(config.weave_queue, timeout_s)

    report.parked = ([f"{config.unroll_queue}:{j}" for j in broker.parked(config.unroll_queue)]
                     + [f"{config.weave_queue}:{j}" for j in broker.parked(config.weave_queue)])
    report.worker_kills = unrollers.kills + weavers.kills
    n_stacks, n_frames, fractions = assemble_stored_stacks(config, store)
    report.stacks_stored, report.frames_stored = n_stacks, n_frames
    report.mean_hole_fraction = float(np.mean(fractions)) if fractions else 0.0
    report.wall_time_s = time.perf_counter() - t0
    if report.parked:
        log.warning("batch %s finished with %d parked jobs", config.task, len(report.parked))
    return report


# -- on-policy loop -------------------------------------------------------------

@dataclass
class OnPolicyReport:
    task: str
    trajectories: int = 0
    rpc_calls: int = 0
    stacks_stored: int = 0
    flagged: list = field(default_factory=list)
    digests: list = field(default_factory=list)  # (request digest, reply digest) per successful call
    wall_time_s: float = 0.0

    @property
    def mismatches(self) -> int:
        return sum(a != b for a, b in self.digests)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mismatches"] = self.mismatches
        return d


def run_onpolicy_loop(config: TaskConfig, broker, store: DataStore, *, trajectories=None,
                      rpc_deadline_s: float = 10.0, pool: PromptPool | None = None,
                      poses_for=None) -> OnPolicyReport:
    """Per 7-step segment: RPC the keyframe, warp the rest locally, store the stack.

    ``poses_for(index)`` overrides the scripted trajectory source.
    """
    t0 = time.perf_counter()
    scene = build_terrain(config.terrain)
    K = config.intrinsics
    indices = list(range(config.n_trajectories)) if trajectories is None else list(trajectories)
    report = OnPolicyReport(config.task, trajectories=len(indices))
    reply_queue = new_reply_queue()
    for traj in indices:
        poses = poses_for(traj) if poses_for is not None else trajectory_poses(config, traj, scene)
        fg, bg = _prompt_for(config, pool, traj)
        for s, (a, b) in enumerate(segments(len(poses))):
            renders = [raycast(scene, K, p, config.near, config.far) for p in poses[a:b]]
            request = keyframe_request(config, *renders[0], fg, bg, segment_seed(config, traj, s))
            report.rpc_calls += 1
            try:
                image = rpc_generate(broker, request, rpc_deadline_s, reply_queue=reply_queue)
            except RpcTimeoutError as exc:
                log.warning("trajectory %d segment %d skipped: %s", traj, s, exc)
                report.flagged.append({"trajectory": traj, "segment": s, "error": str(exc)})
                continue
            report.digests.append((request.digest(), image.request_digest))
            key = StoreKey(config.task, config.scene, *_names(traj, s), request.digest())
            stack = assemble_stack(image.rgb, [(d, p) for (d, _), p in zip(renders, poses[a:b])], K,
                                   fill=config.fill, provenance={**key.to_dict(), "generator_seed": request.seed})
            store.put(key, {"request.json": request.to_bytes(), **stack_files(stack)})
            report.stacks_stored += 1
    report.wall_time_s = time.perf_counter() - t0
    return report
