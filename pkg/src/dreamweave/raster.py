"""Binary raster files for depth, flow and labels.

Depth and flow files share a little-endian header::

    magic      4 bytes   b"DWDM" (depth) or b"DWFL" (flow)
    version    uint32    1
    width      uint32
    height     uint32
    near       float64
    far        float64
    pose       12 x float64   rotation row-major, then translation
    intrinsics 6 x float64    fx, fy, cx, cy, width, height

Depth body: height*width float32 z values, row-major.
Flow body: height*width*2 float32 (du, dv interleaved), followed by the
validity plane packed 8 pixels per byte, most significant bit first.
Label images are stored as 8-bit grayscale PNG.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, DepthMap, Pose
from .flow import FlowField

DEPTH_MAGIC = b"DWDM"
FLOW_MAGIC = b"DWFL"
VERSION = 1
HEADER = struct.Struct("<4sIIIdd12d6d")


class RasterFormatError(ValueError):
    pass


def _header(magic, width, height, near, far, pose: Pose, K: CameraIntrinsics) -> bytes:
    return HEADER.pack(magic, VERSION, width, height, near, far, *pose.as_array(), *K.as_tuple())


def _read_header(data: bytes, magic: bytes):
    if len(data) < HEADER.size:
        raise RasterFormatError("truncated header")
    fields = HEADER.unpack_from(data)
    if fields[0] != magic:
        raise RasterFormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != VERSION:
        raise RasterFormatError(f"unsupported version {fields[1]}")
    width, height, near, far = fields[2:6]
    pose = Pose.from_array(fields[6:18])
    K = CameraIntrinsics.from_tuple(fields[18:24])
    return width, height, near, far, pose, K


def depth_to_bytes(depth: DepthMap, pose: Pose, K: CameraIntrinsics) -> bytes:
    body = np.ascontiguousarray(depth.z, dtype="<f4").tobytes()
    return _header(DEPTH_MAGIC, depth.width, depth.height, depth.near, depth.far, pose, K) + body


def depth_from_bytes(data: bytes):
    """Returns ``(DepthMap, Pose, CameraIntrinsics)``."""
    width, height, near, far, pose, K = _read_header(data, DEPTH_MAGIC)
    n = width * height
    body = data[HEADER.size:]
    if len(body) != 4 * n:
        raise RasterFormatError(f"depth body has {len(body)} bytes, expected {4 * n}")
    z32 = np.frombuffer(body, dtype="<f4").reshape(height, width)
    # keep the no-hit sentinel exact after the float32 round trip
    z = np.where(z32 >= np.float32(far), far, z32.astype(np.float64))
    return DepthMap(z, near, far), pose, K


def flow_to_bytes(flow: FlowField, near: float, far: float, pose: Pose, K: CameraIntrinsics) -> bytes:
    disp = np.ascontiguousarray(flow.displacement, dtype="<f4").tobytes()
    bits = np.packbits(flow.valid.ravel()).tobytes()
    return _header(FLOW_MAGIC, flow.width, flow.height, near, far, pose, K) + disp + bits


def flow_from_bytes(data: bytes):
    """Returns ``(FlowField, Pose, CameraIntrinsics)``; the pose is the source view."""
    width, height, _, _, pose, K = _read_header(data, FLOW_MAGIC)
    n = width * height
    body = data[HEADER.size:]
    nbits = (n + 7) // 8
    if len(body) != 8 * n + nbits:
        raise RasterFormatError(f"flow body has {len(body)} bytes, expected {8 * n + nbits}")
    disp = np.frombuffer(body[:8 * n], dtype="<f4").reshape(height, width, 2).astype(np.float64)
    valid = np.unpackbits(np.frombuffer(body[8 * n:], dtype=np.uint8), count=n).astype(bool)
    return FlowField(disp, valid.reshape(height, width)), pose, K


def labels_to_png(labels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def labels_from_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)))


def save_depth(path, depth: DepthMap, pose: Pose, K: CameraIntrinsics) -> None:
    Path(path).write_bytes(depth_to_bytes(depth, pose, K))


def load_depth(path):
    return depth_from_bytes(Path(path).read_bytes())
