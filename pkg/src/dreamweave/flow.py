"""Ground-truth optical flow from z-depth and a camera pose pair.

No-hit pixels (depth at the far sentinel) are treated as points at infinity:
only the relative rotation moves them. Everything else is reprojected
through its unprojected 3D point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, DepthMap, Pose, project, unproject

DEFAULT_TOL = 0.01
# landing positions within this many pixels of the border snap onto it
EDGE_EPS = 1e-6
# bilinear taps lighter than this do not take part in footprint tests
TAP_EPS = 1e-9


@dataclass
class FlowField:
    displacement: np.ndarray  # (H, W, 2), (du, dv) in pixels
    valid: np.ndarray  # (H, W) bool

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    def targets(self) -> np.ndarray:
        """Landing position (u + du, v + dv) per pixel, shape (H, W, 2)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1) + self.displacement


def _check_shape(depth: DepthMap, K: CameraIntrinsics):
    if depth.shape != K.shape:
        raise ValueError(f"depth is {depth.width}x{depth.height} but intrinsics are {K.width}x{K.height}")


def relative_pose(pose_src: Pose, pose_dst: Pose) -> Pose:
    """Transform taking source-camera coordinates to destination-camera coordinates."""
    return pose_dst.inverse().compose(pose_src)


def compute_flow(depth_src: DepthMap, pose_src: Pose, pose_dst: Pose, K: CameraIntrinsics) -> FlowField:
    _check_shape(depth_src, K)
    rel = relative_pose(pose_src, pose_dst)
    u, v = K.pixel_grid()
    sky = depth_src.no_hit
    pts = unproject(u, v, np.where(sky, 1.0, depth_src.z), K)
    moved = np.where(sky[..., None], rel.apply_direction(pts), rel.apply(pts))
    uv, _, in_front = project(moved, K)
    W, H = K.width, K.height
    inside = ((uv[..., 0] >= -EDGE_EPS) & (uv[..., 0] <= W - 1 + EDGE_EPS)
              & (uv[..., 1] >= -EDGE_EPS) & (uv[..., 1] <= H - 1 + EDGE_EPS))
    valid = in_front & inside
    uv[..., 0] = np.clip(uv[..., 0], 0, W - 1)
    uv[..., 1] = np.clip(uv[..., 1], 0, H - 1)
    disp = np.stack([uv[..., 0] - u, uv[..., 1] - v], axis=-1)
    disp[~valid] = 0.0
    return FlowField(disp, valid)


def bilinear_taps(x: np.ndarray, y: np.ndarray, width: int, height: int):
    """Integer corner indices and weights for sampling at in-frame (x, y)."""
    x0 = np.clip(np.floor(x).astype(np.int64), 0, width - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    taps = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
            (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)]
    return taps


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W) or (H, W, C) at float positions, in float64."""
    H, W = image.shape[:2]
    img = image.astype(np.float64)
    out = 0.0
    for yi, xi, w in bilinear_taps(x, y, W, H):
        out = out + (w[..., None] if img.ndim == 3 else w) * img[yi, xi]
    return out


def visibility_mask(flow: FlowField, depth_src: DepthMap, depth_dst: DepthMap, pose_src: Pose,
                    pose_dst: Pose, K: CameraIntrinsics, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Updated validity: keep pixels whose reprojected point is seen in the destination view.

    A reprojected point is visible when its destination z-depth agrees within
    ``tol`` with the destination depth at the landing position, interpolated
    bilinearly in inverse depth (exact across planar patches). Points at
    infinity need every contributing destination tap to be a no-hit pixel.
    Without a baseline nothing can be occluded, so the mask is returned as is.
    """
    _check_shape(depth_src, K)
    _check_shape(depth_dst, K)
    valid = flow.valid.copy()
    rel = relative_pose(pose_src, pose_dst)
    if not np.any(rel.translation) or tol == np.inf:
        return valid
    targets = flow.targets()
    x, y = targets[..., 0], targets[..., 1]
    sky_src = depth_src.no_hit
    u, v = K.pixel_grid()
    pts = rel.apply(unproject(u, v, np.where(sky_src, 1.0, depth_src.z), K))
    z_expected = pts[..., 2]

    inv_dst = 1.0 / depth_dst.z
    sky_dst = depth_dst.no_hit
    inv_interp = np.zeros(K.shape)
    all_sky = np.ones(K.shape, dtype=bool)
    for yi, xi, w in bilinear_taps(x, y, K.width, K.height):
        inv_interp += w * inv_dst[yi, xi]
        all_sky &= (w <= TAP_EPS) | sky_dst[yi, xi]
    with np.errstate(divide="ignore"):
        z_interp = 1.0 / inv_interp
    agrees = np.abs(z_interp - z_expected) <= tol
    return valid & np.where(sky_src, all_sky, agrees)
