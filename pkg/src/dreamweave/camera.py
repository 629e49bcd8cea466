"""Pinhole camera model, pose algebra and the depth conditioning transforms.

Conventions used throughout the package:

* camera frame: x right, y down, z forward (z-depth is the z coordinate);
* world frame: x along the terrain lane, y to the left, z up;
* pixel coordinates are column/row indices, pixel centres sit on integers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_WIDTH = 320
DEFAULT_HEIGHT = 180
DEFAULT_FOV_DEG = 120.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bad resolution {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_tuple(self) -> tuple[float, ...]:
        return (self.fx, self.fy, self.cx, self.cy, float(self.width), float(self.height))

    @classmethod
    def from_tuple(cls, values) -> "CameraIntrinsics":
        fx, fy, cx, cy, w, h = (float(v) for v in values)
        return cls(fx, fy, cx, cy, int(w), int(h))

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) float arrays of shape (height, width)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v

    def ray_directions(self) -> np.ndarray:
        """Camera-frame ray per pixel, scaled so its z component is exactly 1."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def intrinsics_from_fov(horizontal_fov: float, width: int = DEFAULT_WIDTH,
                        height: int = DEFAULT_HEIGHT) -> CameraIntrinsics:
    if not (0.0 < horizontal_fov < 180.0):
        raise ValueError(f"horizontal FoV must lie in (0, 180) degrees, got {horizontal_fov}")
    fx = (width / 2.0) / math.tan(math.radians(horizontal_fov) / 2.0)
    return CameraIntrinsics(fx, fx, width / 2.0, height / 2.0, int(width), int(height))


_I3 = np.eye(3)


def _det3(R: np.ndarray) -> float:
    (a, b, c), (d, e, f), (g, h, i) = R.tolist()
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - _I3).max() > 1e-9 or _det3(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return points @ self.rotation.T + self.translation

    def apply_direction(self, dirs: np.ndarray) -> np.ndarray:
        return dirs @ self.rotation.T

    def as_array(self) -> np.ndarray:
        """12 floats, rotation row-major then translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_array(cls, values) -> "Pose":
        values = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(values[:9].reshape(3, 3), values[9:])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    right /= n
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def yaw_pitch_pose(position, yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> Pose:
    """Camera at ``position`` looking along world +x rotated by yaw (about z, left positive),
    pitched down by ``pitch`` radians and rolled about its forward axis."""
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    cy, sy = math.cos(yaw), math.sin(yaw)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    # pitch: rotation about the camera x axis, positive tilts the view down
    cp, sp = math.cos(pitch), math.sin(pitch)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    cr, sr = math.cos(roll), math.sin(roll)
    Rroll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return Pose(Rz @ base @ Rx @ Rroll, position)


def unproject(u, v, z, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for pixel coordinates at z-depth ``z``. Broadcasts."""
    u, v, z = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64),
                                  np.asarray(z, dtype=np.float64))
    return np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=-1)


def project(points: np.ndarray, K: CameraIntrinsics):
    """Project (..., 3) camera-frame points.

    Returns ``(uv, z, valid)``; ``valid`` is False for points at or behind the
    camera plane, whose ``uv`` is set to 0.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    u = np.where(valid, K.fx * points[..., 0] / safe_z + K.cx, 0.0)
    v = np.where(valid, K.fy * points[..., 1] / safe_z + K.cy, 0.0)
    return np.stack([u, v], axis=-1), z, valid


@dataclass
class DepthMap:
    """Metric z-depth raster; pixels at ``far`` are no-hit (sky) pixels."""

    z: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {self.z.shape}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @property
    def width(self) -> int:
        return self.z.shape[1]

    @property
    def height(self) -> int:
        return self.z.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape

    @property
    def no_hit(self) -> np.ndarray:
        return self.z >= self.far


def normalize_disparity(depth) -> np.ndarray:
    """Invert the z-buffer and rescale it to [0, 1] within the image.

    Constant depth maps to all zeros.
    """
    z = np.asarray(getattr(depth, "z", depth), dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth values must be positive")
    d = 1.0 / z
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def clip_depth(depth: DepthMap, near: float, far: float) -> DepthMap:
    if not (0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    return DepthMap(np.clip(depth.z, near, far), near, far)
