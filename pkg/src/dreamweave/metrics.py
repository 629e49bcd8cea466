"""Rollout logs and the two navigation metrics: goal reach fraction and forward displacement.

Rollout log file: JSON Lines, one object per trajectory::

    {"trajectory_id": "t0001", "task": "stairs", "scene": "s1",
     "times": [0.0, 0.02, ...],                 # seconds, one per pose
     "poses": [[r00 .. r22, tx, ty, tz], ...],  # camera-to-world, 12 floats
     "goals": [[x, y, z], ...],                 # ordered waypoints, last one is the final goal
     "reach_events": [[goal_index, time], ...],
     "start": [x, y, z]}
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .camera import Pose


@dataclass
class RolloutLog:
    trajectory_id: str
    times: np.ndarray
    poses: list
    goals: np.ndarray
    reach_events: list = field(default_factory=list)  # [(goal index, time)]
    start: np.ndarray | None = None
    task: str = ""
    scene: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, 3)
        self.poses = [p if isinstance(p, Pose) else Pose.from_array(p) for p in self.poses]
        if len(self.poses) != len(self.times):
            raise ValueError(f"{len(self.poses)} poses but {len(self.times)} timestamps")
        if not self.poses:
            raise ValueError("rollout has no poses")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("pose timestamps must be non-decreasing")
        self.start = (self.poses[0].translation.copy() if self.start is None
                      else np.asarray(self.start, dtype=np.float64).reshape(3))
        events = [(int(g), float(t)) for g, t in self.reach_events]
        for g, _ in events:
            if not 0 <= g < len(self.goals):
                raise ValueError(f"reach event references goal {g}, log has {len(self.goals)} goals")
        if any(b[1] < a[1] for a, b in zip(events, events[1:])):
            raise ValueError("reach events must be non-decreasing in time")
        self.reach_events = events

    @property
    def final_position(self) -> np.ndarray:
        return self.poses[-1].translation

    @property
    def final_goal_distance(self) -> float:
        """Distance from the start to the last goal."""
        return float(np.linalg.norm(self.goals[-1] - self.start)) if len(self.goals) else 0.0

    def goals_reached(self) -> set[int]:
        return {g for g, _ in self.reach_events}

    def transformed(self, T: Pose) -> "RolloutLog":
        """The same rollout expressed in another world frame (``T`` maps old world to new world)."""
        return RolloutLog(self.trajectory_id, self.times.copy(), [T.compose(p) for p in self.poses],
                          T.apply(self.goals) if len(self.goals) else self.goals.copy(), list(self.reach_events),
                          T.apply(self.start), self.task, self.scene)

    def to_dict(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id, "task": self.task, "scene": self.scene,
            "times": self.times.tolist(), "poses": [p.as_array().tolist() for p in self.poses],
            "goals": self.goals.tolist(), "reach_events": [list(e) for e in self.reach_events],
            "start": self.start.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutLog":
        return cls(d["trajectory_id"], d["times"], d["poses"], d["goals"], d.get("reach_events", []),
                   d.get("start"), d.get("task", ""), d.get("scene", ""))


def load_rollout_logs(path) -> list[RolloutLog]:
    logs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    logs.append(RolloutLog.from_dict(json.loads(line)))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{n}: {exc}") from exc
    return logs


def save_rollout_logs(logs: Iterable[RolloutLog], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(json.dumps(log.to_dict()) + "\n")


def fgr(logs: Sequence[RolloutLog]) -> float:
    """Goals reached (each goal counted once per log) over goals attempted, pooled across logs."""
    if not logs:
        raise ValueError("fgr needs at least one rollout log")
    total = sum(len(log.goals) for log in logs)
    if total == 0:
        raise ValueError("logs contain no goals")
    return sum(len(log.goals_reached()) for log in logs) / total


def x_displacement(log: RolloutLog) -> float:
    """Progress of the final pose along the start-to-final-goal axis, as a fraction of that distance."""
    if len(log.goals) == 0:
        raise ValueError("log has no goals")
    ax, ay, az = (log.goals[-1] - log.start).tolist()
    dx, dy, dz = (log.final_position - log.start).tolist()
    # spelled out rather than a BLAS dot so the result does not depend on the numpy build
    dist2 = ax * ax + ay * ay + az * az
    if dist2 == 0.0:
        raise ValueError("final goal coincides with the start")
    progress = (dx * ax + dy * ay + dz * az) / dist2
    return min(max(progress, 0.0), 1.0)


def metric_report(logs: Sequence[RolloutLog]) -> list[dict]:
    """One row per (task, scene) with FGR and mean x-displacement, plus an overall row."""
    groups: dict[tuple[str, str], list[RolloutLog]] = defaultdict(list)
    for log in logs:
        groups[(log.task, log.scene)].append(log)
    rows = []
    for (task, scene), group in sorted(groups.items()):
        rows.append(_row(task, scene, group))
    if len(groups) > 1:
        rows.append(_row("all", "", list(logs)))
    return rows


def _row(task: str, scene: str, logs: Sequence[RolloutLog]) -> dict:
    xs = [x_displacement(log) for log in logs]
    return {"task": task, "scene": scene, "trials": len(logs), "fgr": fgr(logs),
            "x_displacement": float(np.mean(xs)), "x_displacement_std": float(np.std(xs))}


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'task':<12} {'scene':<14} {'trials':>6} {'FGR':>6} {'x-disp':>12}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['task']:<12} {r['scene']:<14} {r['trials']:>6d} {r['fgr']:>6.2f} "
                     f"{r['x_displacement']:>6.2f}±{r['x_displacement_std']:.2f}")
    return "\n".join(lines)


def synthetic_logs(n: int, rng: np.random.Generator, *, n_goals=(1, 5), steps=(10, 60), task="synthetic",
                   scene="lane") -> list[RolloutLog]:
    """Random walks towards random waypoints; some goals reached, some not."""
    from .camera import yaw_pitch_pose
    logs = []
    for k in range(n):
        start = rng.uniform(-1, 1, 3) * [1, 1, 0.1]
        goals = start + np.cumsum(rng.uniform([0.5, -0.5, -0.1], [2.0, 0.5, 0.1], (rng.integers(*n_goals), 3)),
                                  axis=0)
        T = int(rng.integers(*steps))
        frac = rng.uniform(-0.2, 1.3)
        path = start + np.outer(np.linspace(0, frac, T), goals[-1] - start) + rng.normal(0, 0.05, (T, 3))
        times = np.arange(T) * 0.02
        poses = [yaw_pitch_pose(p, yaw=rng.uniform(-0.5, 0.5)) for p in path]
        reached = sorted(rng.choice(len(goals), int(rng.integers(0, len(goals) + 1)), replace=False).tolist())
        events = []
        for g in reached:
            events += [(g, 0.0)] * int(rng.integers(1, 3))  # duplicates exercise per-goal dedup
        ev_times = np.sort(rng.uniform(0, times[-1] if T > 1 else 0.0, len(events)))
        events = [(g, float(t)) for (g, _), t in zip(events, ev_times)]
        logs.append(RolloutLog(f"{task}-{k:04d}", times, poses, goals, events, start, task, scene))
    return logs


def rigid_transform(rng: np.random.Generator) -> Pose:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose(R, rng.uniform(-100, 100, 3))
