"""Box-composed terrain and a vectorized slab-test raycaster.

Terrain config schema (JSON)::

    {
      "kind": "flat" | "stairs" | "hurdles",
      "stairs":  {"step_count": 5, "rise": 0.17, "run": 0.30, "width": 2.0},
      "hurdles": {"count": 3, "height": 0.25, "thickness": 0.1, "spacing": 1.5, "lane_width": 2.0},
      "side_walls": {"height": 1.0, "gap": 0.3} | null,
      "labels": {"ground": 1, "obstacle": 2, "wall": 3},
      "start": 1.5, "ground_length": 12.0, "ground_back": 2.0, "ground_width": 8.0
    }

Only the block matching ``kind`` is read. All lengths are meters.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, DepthMap, Pose

SKY_LABEL = 0
KINDS = ("flat", "stairs", "hurdles")
DEFAULT_LABELS = {"ground": 1, "obstacle": 2, "wall": 3}
GROUND_THICKNESS = 0.1
WALL_THICKNESS = 0.1


class TerrainSpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class StairsSpec:
    step_count: int = 5
    rise: float = 0.17
    run: float = 0.30
    width: float = 2.0


@dataclass(frozen=True)
class HurdleSpec:
    count: int = 3
    height: float = 0.25
    thickness: float = 0.1
    spacing: float = 1.5
    lane_width: float = 2.0


@dataclass(frozen=True)
class WallSpec:
    height: float = 1.0
    gap: float = 0.3


@dataclass(frozen=True)
class TerrainSpec:
    kind: str = "flat"
    stairs: StairsSpec = field(default_factory=StairsSpec)
    hurdles: HurdleSpec = field(default_factory=HurdleSpec)
    side_walls: WallSpec | None = None
    labels: dict = field(default_factory=lambda: dict(DEFAULT_LABELS))
    start: float = 1.5
    ground_length: float = 12.0
    ground_back: float = 2.0
    ground_width: float = 8.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise TerrainSpecError("kind", f"expected one of {KINDS}, got {self.kind!r}")
        lengths = {"start": self.start, "ground_length": self.ground_length,
                   "ground_back": self.ground_back, "ground_width": self.ground_width}
        if self.kind == "stairs":
            s = self.stairs
            if not isinstance(s.step_count, int) or s.step_count < 1:
                raise TerrainSpecError("stairs.step_count", f"must be an integer >= 1, got {s.step_count!r}")
            lengths.update({"stairs.rise": s.rise, "stairs.run": s.run, "stairs.width": s.width})
        elif self.kind == "hurdles":
            h = self.hurdles
            if not isinstance(h.count, int) or h.count < 1:
                raise TerrainSpecError("hurdles.count", f"must be an integer >= 1, got {h.count!r}")
            lengths.update({"hurdles.height": h.height, "hurdles.thickness": h.thickness,
                            "hurdles.spacing": h.spacing, "hurdles.lane_width": h.lane_width})
        if self.side_walls is not None:
            lengths.update({"side_walls.height": self.side_walls.height,
                            "side_walls.gap": self.side_walls.gap})
        for name, value in lengths.items():
            if not (isinstance(value, (int, float)) and value > 0):
                raise TerrainSpecError(name, f"must be strictly positive, got {value!r}")
        for role in ("ground", "obstacle", "wall"):
            label = self.labels.get(role)
            if not isinstance(label, int) or not (1 <= label <= 255):
                raise TerrainSpecError(f"labels.{role}", f"must be an integer in [1, 255], got {label!r}")

    @property
    def lane_width(self) -> float:
        if self.kind == "stairs":
            return self.stairs.width
        return self.hurdles.lane_width

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.side_walls is None:
            d["side_walls"] = None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TerrainSpec":
        data = dict(data)
        try:
            if "stairs" in data:
                data["stairs"] = StairsSpec(**data["stairs"])
            if "hurdles" in data:
                data["hurdles"] = HurdleSpec(**data["hurdles"])
            if data.get("side_walls") is not None:
                data["side_walls"] = WallSpec(**data["side_walls"])
            if "labels" in data:
                data["labels"] = {**DEFAULT_LABELS, **data["labels"]}
            spec = cls(**data)
        except TypeError as exc:
            raise TerrainSpecError("<root>", str(exc)) from None
        spec.validate()
        return spec


def load_terrain_spec(path) -> TerrainSpec:
    return TerrainSpec.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    label: int

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if not all(a < b for a, b in zip(lo, hi)) or len(lo) != 3 or len(hi) != 3:
            raise ValueError(f"degenerate box {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, points: np.ndarray, eps: float = 0.0) -> np.ndarray:
        lo = np.asarray(self.lo) - eps
        hi = np.asarray(self.hi) + eps
        return np.all((points >= lo) & (points <= hi), axis=-1)


@dataclass(frozen=True)
class SceneGeometry:
    boxes: tuple
    label_set: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        labels = frozenset(self.label_set) or frozenset(b.label for b in self.boxes)
        object.__setattr__(self, "label_set", labels)
        for b in self.boxes:
            if b.label not in labels:
                raise ValueError(f"box label {b.label} not in declared label set {sorted(labels)}")

    @property
    def bounds(self):
        if not self.boxes:
            return None
        lo = np.min([b.lo for b in self.boxes], axis=0)
        hi = np.max([b.hi for b in self.boxes], axis=0)
        return tuple(lo), tuple(hi)

    def height_at(self, x: float, y: float) -> float:
        """Top of the highest box over (x, y); 0 outside all boxes."""
        tops = [b.hi[2] for b in self.boxes if b.lo[0] <= x <= b.hi[0] and b.lo[1] <= y <= b.hi[1]]
        return max(tops, default=0.0)


def build_terrain(spec: TerrainSpec) -> SceneGeometry:
    spec.validate()
    lab = spec.labels
    half_ground = spec.ground_width / 2
    boxes = [Box((-spec.ground_back, -half_ground, -GROUND_THICKNESS),
                 (spec.ground_length, half_ground, 0.0), lab["ground"])]
    if spec.kind == "stairs":
        s = spec.stairs
        for i in range(1, s.step_count + 1):
            x0 = spec.start + (i - 1) * s.run
            boxes.append(Box((x0, -s.width / 2, 0.0), (x0 + s.run, s.width / 2, i * s.rise), lab["obstacle"]))
    elif spec.kind == "hurdles":
        h = spec.hurdles
        for j in range(h.count):
            x0 = spec.start + j * h.spacing
            boxes.append(Box((x0, -h.lane_width / 2, 0.0), (x0 + h.thickness, h.lane_width / 2, h.height),
                             lab["obstacle"]))
    if spec.side_walls is not None:
        w = spec.side_walls
        inner = spec.lane_width / 2 + w.gap
        for sign in (1.0, -1.0):
            ys = sorted((sign * inner, sign * (inner + WALL_THICKNESS)))
            boxes.append(Box((0.0, ys[0], 0.0), (spec.ground_length, ys[1], w.height), lab["wall"]))
    return SceneGeometry(tuple(boxes), frozenset(lab.values()))


def _canonical(boxes):
    return sorted(boxes, key=lambda b: (b.label, b.lo, b.hi))


def slab_intervals(box: Box, origin: np.ndarray, dirs: np.ndarray):
    """Entry/exit ray parameters of ``box`` for rays ``origin + t * dirs``."""
    t_enter = np.full(dirs.shape[:-1], -np.inf)
    t_exit = np.full(dirs.shape[:-1], np.inf)
    for axis in range(3):
        d = dirs[..., axis]
        o = origin[axis]
        lo, hi = box.lo[axis], box.hi[axis]
        parallel = d == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tl = np.minimum(t1, t2)
        th = np.maximum(t1, t2)
        if lo <= o <= hi:
            tl = np.where(parallel, -np.inf, tl)
            th = np.where(parallel, np.inf, th)
        else:
            tl = np.where(parallel, np.inf, tl)
            th = np.where(parallel, -np.inf, th)
        t_enter = np.maximum(t_enter, tl)
        t_exit = np.minimum(t_exit, th)
    return t_enter, t_exit


def raycast(scene: SceneGeometry, camera: CameraIntrinsics, pose: Pose, near: float, far: float):
    """Render z-depth and asset labels.

    Rays are scaled to unit camera-z, so the ray parameter of a hit is its
    z-depth. A box counts as hit when its entry point lies in [near, far];
    no-hit pixels get depth ``far`` and label 0.
    """
    if not (0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    dirs = pose.apply_direction(camera.ray_directions())
    origin = pose.translation
    depth = np.full(camera.shape, np.inf)
    labels = np.zeros(camera.shape, dtype=np.uint8)
    for box in _canonical(scene.boxes):
        t_enter, t_exit = slab_intervals(box, origin, dirs)
        hit = (t_enter <= t_exit) & (t_enter >= near) & (t_enter <= far) & (t_enter < depth)
        depth = np.where(hit, t_enter, depth)
        labels[hit] = box.label
    depth[np.isinf(depth)] = far
    return DepthMap(depth, near, far), labels


def binary_masks(labels: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """One boolean mask per label present, ascending by label."""
    labels = np.asarray(labels)
    return [(int(lab), labels == lab) for lab in np.unique(labels)]
