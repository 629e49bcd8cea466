"""Scripted ego-motion along the terrain lane, standing in for policy rollouts."""
from __future__ import annotations

import math

import numpy as np

from .camera import Pose, yaw_pitch_pose
from .scene import SceneGeometry

DT = 0.02
SPEED_RANGE = (0.3, 0.8)
MOUNT_HEIGHT = 0.45
PITCH = math.radians(20.0)


def walk(scene: SceneGeometry, n_steps: int, speed: float = 0.5, *, start=(0.0, 0.0), yaw: float = 0.0,
         mount_height: float = MOUNT_HEIGHT, pitch: float = PITCH, dt: float = DT) -> list[Pose]:
    """Constant-speed walk with the camera riding ``mount_height`` above the terrain top."""
    poses = []
    x0, y0 = start
    heading = np.array([math.cos(yaw), math.sin(yaw)])
    for i in range(n_steps):
        x, y = np.array([x0, y0]) + heading * speed * dt * i
        z = scene.height_at(x, y) + mount_height
        poses.append(yaw_pitch_pose((x, y, z), yaw=yaw, pitch=pitch))
    return poses


def strafe(position, n_steps: int, step: float, *, yaw: float = 0.0, pitch: float = PITCH) -> list[Pose]:
    """Sideways motion (towards +y for positive ``step``) at fixed orientation."""
    x, y, z = position
    lateral = np.array([-math.sin(yaw), math.cos(yaw)])
    return [yaw_pitch_pose((x + lateral[0] * step * i, y + lateral[1] * step * i, z), yaw=yaw, pitch=pitch)
            for i in range(n_steps)]


def pan(position, n_steps: int, yaw_rate: float, *, yaw: float = 0.0, pitch: float = PITCH,
        pitch_rate: float = 0.0, dt: float = DT) -> list[Pose]:
    """Pure rotation about a fixed camera centre."""
    return [yaw_pitch_pose(position, yaw=yaw + yaw_rate * dt * i, pitch=pitch + pitch_rate * dt * i)
            for i in range(n_steps)]


def sample_walk(scene: SceneGeometry, n_steps: int, rng: np.random.Generator, *, lane_width: float = 1.0,
                speed_range=SPEED_RANGE, max_yaw: float = math.radians(10.0), **kwargs) -> list[Pose]:
    speed = rng.uniform(*speed_range)
    start = (rng.uniform(-0.5, 0.5), rng.uniform(-lane_width / 2, lane_width / 2))
    return walk(scene, n_steps, speed, start=start, yaw=rng.uniform(-max_yaw, max_yaw), **kwargs)
