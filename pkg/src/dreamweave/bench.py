"""Throughput of keyframe-plus-warp generation against generating every frame."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .camera import intrinsics_from_fov, normalize_disparity
from .dim import STACK_LEN, assemble_stack, speedup_model
from .generator import StubGenerator, build_request
from .scene import TerrainSpec, build_terrain, raycast
from .trajectory import walk

BENCH_RESOLUTION = (160, 90)
NEAR, FAR = 0.05, 10.0


class DelayedGenerator:
    """Stub generator that also sleeps a fixed time per call, standing in for a slow model."""

    def __init__(self, delay_s: float, inner=None):
        self.delay_s = delay_s
        self.inner = inner or StubGenerator()
        self.name = f"delayed-{self.inner.name}"

    def generate(self, request):
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        return self.inner.generate(request)


@dataclass
class BenchReport:
    resolution: tuple
    stack_len: int
    injected_gen_delay_ms: float
    trials: int
    per_frame_mode_s: float     # wall time per frame, generating every frame
    dim_mode_s: float           # wall time per frame, one generation per stack
    t_gen_s: float              # mean generation call
    t_warp_s: float             # mean warp plus fill per follower frame
    t_render_s: float           # mean depth and label render per frame
    measured_speedup: float
    model_speedup: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def format(self) -> str:
        w, h = self.resolution
        return "\n".join([
            f"resolution {w}x{h}, stack {self.stack_len}, injected delay {self.injected_gen_delay_ms:.0f} ms, "
            f"{self.trials} trials",
            f"  per-frame generation : {self.per_frame_mode_s * 1e3:9.2f} ms/frame",
            f"  keyframe + warp      : {self.dim_mode_s * 1e3:9.2f} ms/frame",
            f"  t_gen {self.t_gen_s * 1e3:.2f} ms, t_warp {self.t_warp_s * 1e3:.2f} ms, "
            f"t_render {self.t_render_s * 1e3:.2f} ms",
            f"  speedup measured {self.measured_speedup:.3f}, model {self.model_speedup:.3f}",
        ])


def bench_dim(resolution=BENCH_RESOLUTION, stack_len: int = STACK_LEN, injected_gen_delay_ms: float = 780.0,
              trials: int = 3, *, terrain: str = "stairs", seed: int = 0, generator=None) -> BenchReport:
    """Time both modes over the same trajectories; trials run in a fixed order, per-frame mode first."""
    if not 1 <= stack_len <= STACK_LEN:
        raise ValueError(f"stack_len must be in 1..{STACK_LEN}")
    W, H = resolution
    K = intrinsics_from_fov(120.0, W, H)
    scene = build_terrain(TerrainSpec(kind=terrain))
    gen = generator or DelayedGenerator(injected_gen_delay_ms / 1e3)
    rng = np.random.default_rng(seed)
    fg, bg = "cracked concrete steps", "an empty parking lot at dusk"

    def request_for(depth, labels, i):
        return build_request(normalize_disparity(depth), labels, fg, bg, seed=i)

    t_frame = t_dim = 0.0
    gens, warps, renders = [], [], []
    n_frames = 0
    for trial in range(trials):
        poses = walk(scene, stack_len, rng.uniform(0.3, 0.8), start=(rng.uniform(0, 0.5), rng.uniform(-0.3, 0.3)))

        t0 = time.perf_counter()
        for i, pose in enumerate(poses):
            depth, labels = raycast(scene, K, pose, NEAR, FAR)
            gen.generate(request_for(depth, labels, i))
        t_frame += time.perf_counter() - t0

        t0 = time.perf_counter()
        frames = []
        for pose in poses:
            r0 = time.perf_counter()
            frames.append((raycast(scene, K, pose, NEAR, FAR), pose))
            renders.append(time.perf_counter() - r0)
        (depth0, labels0), _ = frames[0]
        g0 = time.perf_counter()
        key = gen.generate(request_for(depth0, labels0, 0)).rgb
        gens.append(time.perf_counter() - g0)
        w0 = time.perf_counter()
        assemble_stack(key, [(d, p) for (d, _), p in frames], K)
        if stack_len > 1:
            warps.append((time.perf_counter() - w0) / (stack_len - 1))
        t_dim += time.perf_counter() - t0
        n_frames += stack_len

    t_gen = float(np.mean(gens))
    t_warp = float(np.mean(warps)) if warps else 0.0
    return BenchReport((W, H), stack_len, injected_gen_delay_ms, trials, t_frame / n_frames, t_dim / n_frames,
                       t_gen, t_warp, float(np.mean(renders)), t_frame / t_dim,
                       speedup_model(t_gen, t_warp, stack_len))
