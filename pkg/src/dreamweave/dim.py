"""Dreams In Motion: propagate one generated keyframe through a short pose sequence.

Stack directory layout::

    frame_00.png ... frame_NN.png    RGB, 8 bit
    holes_00.png ... holes_NN.png    8-bit gray, 255 = hole
    manifest.json

``manifest.json`` (schema "dreamweave.framestack", version 1) holds
``keyframe_index``, ``timestamps_ms``, ``poses`` (12 floats each, rotation
row-major then translation), ``fill``, ``provenance`` and the file lists.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, DepthMap, Pose
from .flow import DEFAULT_TOL, bilinear_sample, compute_flow, visibility_mask

STACK_LEN = 7
FRAME_PERIOD_MS = 20
HOLE_COLOR = (255, 0, 255)
FILL_STRATEGIES = ("mark", "nearest_valid")
MANIFEST_SCHEMA = "dreamweave.framestack"
MANIFEST_VERSION = 1


def warp_frame(keyframe: np.ndarray, depth_key: DepthMap, pose_key: Pose, depth_dst: DepthMap,
               pose_dst: Pose, K: CameraIntrinsics, tol: float = DEFAULT_TOL):
    """Backward-warp ``keyframe`` into the destination view.

    Returns ``(rgb, holes)``. Hole pixels are left black; see :func:`fill_holes`.
    """
    if keyframe.shape[:2] != K.shape or depth_key.shape != K.shape or depth_dst.shape != K.shape:
        raise ValueError(f"resolution mismatch: keyframe {keyframe.shape[:2]}, depth_key {depth_key.shape}, "
                         f"depth_dst {depth_dst.shape}, intrinsics {K.shape}")
    if pose_dst == pose_key:
        return keyframe.copy(), np.zeros(K.shape, dtype=bool)
    flow = compute_flow(depth_dst, pose_dst, pose_key, K)
    valid = visibility_mask(flow, depth_dst, depth_key, pose_dst, pose_key, K, tol)
    targets = flow.targets()
    sampled = bilinear_sample(keyframe, targets[..., 0], targets[..., 1])
    out = np.where(valid[..., None], np.clip(np.rint(sampled), 0, 255), 0).astype(np.uint8)
    return out, ~valid


_FILL_K = 16


def fill_holes(image: np.ndarray, holes: np.ndarray, strategy: str = "nearest_valid") -> np.ndarray:
    if strategy not in FILL_STRATEGIES:
        raise ValueError(f"unknown fill strategy {strategy!r}")
    out = image.copy()
    if not holes.any():
        return out
    if strategy == "mark":
        out[holes] = HOLE_COLOR
        return out
    if holes.all():
        raise ValueError("cannot fill: every pixel is a hole")
    # a nearest valid pixel always has a hole among its 4-neighbours, otherwise the
    # neighbour facing the hole would be valid and strictly closer
    near_hole = np.zeros_like(holes)
    near_hole[1:] |= holes[:-1]
    near_hole[:-1] |= holes[1:]
    near_hole[:, 1:] |= holes[:, :-1]
    near_hole[:, :-1] |= holes[:, 1:]
    valid_rc = np.argwhere(near_hole & ~holes)
    hole_rc = np.argwhere(holes)
    tree = cKDTree(valid_rc)
    k = min(_FILL_K, len(valid_rc))
    dist, idx = tree.query(hole_rc, k=k)
    dist, idx = dist.reshape(len(hole_rc), k), idx.reshape(len(hole_rc), k)
    W = image.shape[1]
    # equidistant candidates resolve to the first in scanline order
    tied = dist <= dist[:, :1] + 1e-9
    order = valid_rc[idx, 0] * W + valid_rc[idx, 1]
    pick = np.argmin(np.where(tied, order, np.iinfo(np.int64).max), axis=1)
    src = valid_rc[idx[np.arange(len(idx)), pick]]
    out[hole_rc[:, 0], hole_rc[:, 1]] = image[src[:, 0], src[:, 1]]
    # rows whose every candidate is tied may have more ties beyond k; settle those exhaustively
    for j in np.flatnonzero(tied.all(axis=1) & (k < len(valid_rc))):
        r, c = hole_rc[j]
        cand = tree.query_ball_point((r, c), dist[j, 0] + 1e-6)
        pts = valid_rc[cand]
        d2 = (pts[:, 0] - r) ** 2 + (pts[:, 1] - c) ** 2
        best = pts[d2 == d2.min()]
        s_rc = best[np.argmin(best[:, 0] * W + best[:, 1])]
        out[r, c] = image[s_rc[0], s_rc[1]]
    return out


@dataclass
class FrameStack:
    frames: list
    hole_masks: list
    timestamps_ms: list
    poses: list
    keyframe_index: int = 0
    fill: str = "nearest_valid"
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def hole_fraction(self) -> float:
        if len(self.hole_masks) <= 1:
            return 0.0
        return float(np.mean([m.mean() for m in self.hole_masks[1:]]))


def assemble_stack(keyframe: np.ndarray, renders, K: CameraIntrinsics, fill: str = "nearest_valid",
                   provenance: dict | None = None, tol: float = DEFAULT_TOL) -> FrameStack:
    """Keyframe plus warped followers for ``renders`` = [(DepthMap, Pose), ...]; renders[0] is the keyframe view."""
    renders = list(renders)
    if not 1 <= len(renders) <= STACK_LEN:
        raise ValueError(f"stack needs 1..{STACK_LEN} renders, got {len(renders)}")
    depth_key, pose_key = renders[0]
    frames = [keyframe.copy()]
    holes = [np.zeros(K.shape, dtype=bool)]
    for depth, pose in renders[1:]:
        rgb, hole = warp_frame(keyframe, depth_key, pose_key, depth, pose, K, tol)
        frames.append(fill_holes(rgb, hole, fill))
        holes.append(hole)
    return FrameStack(frames, holes, [i * FRAME_PERIOD_MS for i in range(len(renders))],
                      [p for _, p in renders], 0, fill, dict(provenance or {}))


def speedup_model(t_gen: float, t_warp: float, stack_len: int = STACK_LEN) -> float:
    """Idealized throughput gain of one generation plus warps over generating every frame."""
    if t_gen <= 0 or t_warp < 0 or stack_len < 1:
        raise ValueError("need t_gen > 0, t_warp >= 0 and stack_len >= 1")
    return stack_len * t_gen / (t_gen + (stack_len - 1) * t_warp)


def stack_manifest(stack: FrameStack) -> dict:
    n = len(stack)
    return {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "keyframe_index": stack.keyframe_index,
        "timestamps_ms": list(stack.timestamps_ms),
        "poses": [p.as_array().tolist() for p in stack.poses],
        "fill": stack.fill,
        "provenance": stack.provenance,
        "frames": [f"frame_{i:02d}.png" for i in range(n)],
        "holes": [f"holes_{i:02d}.png" for i in range(n)],
    }


def encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def stack_files(stack: FrameStack) -> dict[str, bytes]:
    """File name -> bytes for the on-disk stack layout."""
    manifest = stack_manifest(stack)
    files = {}
    for name, frame in zip(manifest["frames"], stack.frames):
        files[name] = encode_png(frame)
    for name, mask in zip(manifest["holes"], stack.hole_masks):
        files[name] = encode_png(mask.astype(np.uint8) * 255)
    files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    return files


def save_stack(stack: FrameStack, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, data in stack_files(stack).items():
        (directory / name).write_bytes(data)
    return directory


def load_stack(directory) -> FrameStack:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA or manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported stack manifest in {directory}")
    frames = [np.asarray(Image.open(directory / n)) for n in manifest["frames"]]
    holes = [np.asarray(Image.open(directory / n)) > 0 for n in manifest["holes"]]
    return FrameStack(frames, holes, manifest["timestamps_ms"],
                      [Pose.from_array(p) for p in manifest["poses"]], manifest["keyframe_index"],
                      manifest["fill"], manifest["provenance"])
