"""Image-generator boundary: request type, procedural stub and remote client.

Wire format (HTTP POST, JSON body; all rasters row-major, base64)::

    {
      "disparity": {"width": W, "height": H, "dtype": "<f4", "data": "<b64 float32 LE>"},
      "regions": [{"prompt": "...",
                   "mask": {"width": W, "height": H, "encoding": "packbits-msb",
                            "data": "<b64 of numpy.packbits(mask.ravel())>"}}, ...],
      "control_strength": 0.8,
      "steps": 6,
      "seed": 0
    }

The disparity is the per-image normalized inverse depth: 1 is the nearest
pixel, 0 the farthest. The response body is::

    {"width": W, "height": H, "channels": 3, "dtype": "u1", "data": "<b64 RGB bytes>"}

Pixels not covered by any region carry no prompt; the background prompt is
sent as an ordinary region over the label-0 / non-foreground pixels.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

from .camera import CameraIntrinsics, Pose
from .scene import SKY_LABEL, SceneGeometry, raycast

log = logging.getLogger(__name__)

URL_ENV = "DREAMWEAVE_GENERATOR_URL"
TOKEN_ENV = "DREAMWEAVE_GENERATOR_TOKEN"
DEFAULT_STEPS = 6
DEFAULT_CONTROL_STRENGTH = 0.8
TEXEL_SIZE = 0.05
SKY_RADIUS = 1.0
TEXTURE_AMPLITUDE = 0.08
UNASSIGNED_GRAY = 0.5


class GeneratorError(RuntimeError):
    retriable = False


class GeneratorTransportError(GeneratorError):
    retriable = True


class ResolutionMismatchError(GeneratorError):
    pass


# -- raster encodings --------------------------------------------------------

def encode_float_raster(values: np.ndarray) -> dict:
    values = np.ascontiguousarray(values, dtype="<f4")
    return {"width": values.shape[1], "height": values.shape[0], "dtype": "<f4",
            "data": base64.b64encode(values.tobytes()).decode("ascii")}


def decode_float_raster(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["height"], obj["width"]).copy()


def encode_mask(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    return {"width": mask.shape[1], "height": mask.shape[0], "encoding": "packbits-msb",
            "data": base64.b64encode(np.packbits(mask.ravel()).tobytes()).decode("ascii")}


def decode_mask(obj: dict) -> np.ndarray:
    n = obj["width"] * obj["height"]
    bits = np.unpackbits(np.frombuffer(base64.b64decode(obj["data"]), dtype=np.uint8), count=n)
    return bits.astype(bool).reshape(obj["height"], obj["width"])


def encode_rgb(rgb: np.ndarray) -> dict:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    return {"width": rgb.shape[1], "height": rgb.shape[0], "channels": 3, "dtype": "u1",
            "data": base64.b64encode(rgb.tobytes()).decode("ascii")}


def decode_rgb(obj: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(obj["data"]), dtype=np.uint8)
    return raw.reshape(obj["height"], obj["width"], 3).copy()


# -- request / result --------------------------------------------------------

@dataclass
class GenerationRequest:
    disparity: np.ndarray
    regions: list = field(default_factory=list)  # [(mask, prompt)]
    control_strength: float = DEFAULT_CONTROL_STRENGTH
    diffusion_steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float32)
        self.regions = [(np.asarray(m, dtype=bool), str(p)) for m, p in self.regions]
        if not 0.0 <= self.control_strength <= 1.0:
            raise ValueError(f"control_strength must lie in [0, 1], got {self.control_strength}")
        if self.diffusion_steps < 1:
            raise ValueError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        covered = np.zeros(self.disparity.shape, dtype=np.int64)
        for mask, _ in self.regions:
            if mask.shape != self.disparity.shape:
                raise ValueError(f"region mask {mask.shape} does not match disparity {self.disparity.shape}")
            covered += mask
        if np.any(covered > 1):
            raise ValueError("region masks overlap")

    @property
    def shape(self) -> tuple[int, int]:
        return self.disparity.shape

    def to_wire(self) -> dict:
        return {
            "disparity": encode_float_raster(self.disparity),
            "regions": [{"prompt": p, "mask": encode_mask(m)} for m, p in self.regions],
            "control_strength": float(self.control_strength),
            "steps": int(self.diffusion_steps),
            "seed": int(self.seed),
        }

    @classmethod
    def from_wire(cls, body: dict) -> "GenerationRequest":
        return cls(decode_float_raster(body["disparity"]),
                   [(decode_mask(r["mask"]), r["prompt"]) for r in body["regions"]],
                   control_strength=body["control_strength"], diffusion_steps=body["steps"],
                   seed=body["seed"])

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_wire(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GenerationRequest":
        return cls.from_wire(json.loads(data))

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class GeneratedImage:
    rgb: np.ndarray
    request_digest: str
    generator: str
    latency_ms: float = 0.0


def build_request(disparity: np.ndarray, labels: np.ndarray, foreground: str, background: str,
                  foreground_labels=(2,), **kwargs) -> GenerationRequest:
    """Two-region request: ``foreground`` over the given asset labels, ``background`` elsewhere."""
    fg = np.isin(labels, list(foreground_labels))
    regions = [(m, p) for m, p in ((fg, foreground), (~fg, background)) if m.any()]
    return GenerationRequest(disparity, regions, **kwargs)


# -- procedural stub ---------------------------------------------------------

_M1 = np.uint64(0xFF51AFD7ED558CCD)
_M2 = np.uint64(0xC4CEB9FE1A85EC53)
_P = (np.uint64(0x9E3779B97F4A7C15), np.uint64(0xBF58476D1CE4E5B9), np.uint64(0x94D049BB133111EB))


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(33))
    x = x * _M1
    x = x ^ (x >> np.uint64(33))
    x = x * _M2
    return x ^ (x >> np.uint64(33))


def _lattice_value(seed: int, ix, iy, iz) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * _P[0]) ^ (iy.astype(np.uint64) * _P[1]) ^ (iz.astype(np.uint64) * _P[2])
        h = _mix(h ^ np.uint64(seed))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 / 2**53) - 1.0


def prompt_seed(prompt: str, seed: int = 0, channel: int = 0) -> int:
    h = hashlib.sha256(f"{seed}:{channel}:{prompt}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def prompt_color(prompt: str, seed: int = 0) -> np.ndarray:
    h = hashlib.sha256(f"{seed}:color:{prompt}".encode()).digest()
    return 0.2 + 0.6 * np.frombuffer(h[:3], dtype=np.uint8) / 255.0


def value_noise(points: np.ndarray, seed: int, texel: float = TEXEL_SIZE) -> np.ndarray:
    """Smoothly interpolated hashed lattice noise in [-1, 1] over world points (..., 3)."""
    g = points / texel
    base = np.floor(g)
    f = g - base
    s = f * f * (3.0 - 2.0 * f)
    ib = base.astype(np.int64)
    out = np.zeros(points.shape[:-1])
    for dx in (0, 1):
        wx = s[..., 0] if dx else 1 - s[..., 0]
        for dy in (0, 1):
            wy = s[..., 1] if dy else 1 - s[..., 1]
            for dz in (0, 1):
                wz = s[..., 2] if dz else 1 - s[..., 2]
                out += wx * wy * wz * _lattice_value(seed, ib[..., 0] + dx, ib[..., 1] + dy, ib[..., 2] + dz)
    return out


def stub_colors(points: np.ndarray, prompts: list, seed: int = 0, texel: float = TEXEL_SIZE) -> np.ndarray:
    """World-anchored colour in [0, 1] for world points (N, 3) with per-point prompt text.

    The shade depends on world height only, so every view of a point agrees.
    """
    points = np.asarray(points, dtype=np.float64)
    out = np.empty(points.shape[:-1] + (3,))
    prompts = np.asarray(prompts, dtype=object)
    for prompt in sorted(set(prompts.tolist())):
        sel = prompts == prompt
        p = points[sel]
        shade = 0.85 + 0.15 * np.tanh(p[:, 2])
        col = prompt_color(prompt, seed)[None, :] * shade[:, None]
        for c in range(3):
            col[:, c] += TEXTURE_AMPLITUDE * value_noise(p, prompt_seed(prompt, seed, c), texel)
        out[sel] = col
    return np.clip(out, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def stub_render(scene: SceneGeometry, pose: Pose, K: CameraIntrinsics, prompts: dict, *,
                seed: int = 0, near: float = 0.05, far: float = 10.0,
                texel: float = TEXEL_SIZE) -> np.ndarray:
    """Render the procedural texture seen from ``pose``.

    ``prompts`` maps asset label to prompt text; label 0 (no hit) is textured
    by world ray direction, as if painted on a sphere at infinity.
    """
    depth, labels = raycast(scene, K, pose, near, far)
    dirs_cam = K.ray_directions()
    world = pose.apply(dirs_cam * depth.z[..., None])
    sky = depth.no_hit
    dirs = pose.apply_direction(dirs_cam)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    world[sky] = dirs[sky] * SKY_RADIUS
    text = np.empty(labels.shape, dtype=object)
    lab = np.where(sky, SKY_LABEL, labels)
    for value in np.unique(lab):
        text[lab == value] = prompts.get(int(value), "")
    rgb = stub_colors(world.reshape(-1, 3), text.ravel().tolist(), seed, texel)
    return to_uint8(rgb.reshape(labels.shape + (3,)))


class StubGenerator:
    """Deterministic stand-in for the diffusion model.

    Each region is painted with a colour hashed from its prompt and the seed,
    shaded by the disparity. Uncovered pixels stay gray. Control strength and
    step count are carried but ignored.
    """

    name = "stub"

    def generate(self, request: GenerationRequest) -> GeneratedImage:
        t0 = time.perf_counter()
        shade = 0.35 + 0.65 * request.disparity.astype(np.float64)
        img = np.full(request.shape + (3,), UNASSIGNED_GRAY)
        for mask, prompt in request.regions:
            img[mask] = prompt_color(prompt, request.seed)[None, :] * shade[mask][:, None]
        rgb = to_uint8(img)
        latency = (time.perf_counter() - t0) * 1e3
        return GeneratedImage(rgb, request.digest(), self.name, latency)


class RemoteGenerator:
    """HTTP client for a diffusion workflow server speaking the wire format above."""

    name = "remote"

    def __init__(self, endpoint: str | None = None, token: str | None = None, timeout: float = 30.0,
                 transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint or os.environ.get(URL_ENV)
        if not self.endpoint:
            raise GeneratorError(f"no endpoint given and {URL_ENV} is unset")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.timeout = timeout
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self):
        self._client.close()

    def generate(self, request: GenerationRequest) -> GeneratedImage:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        t0 = time.perf_counter()
        try:
            resp = self._client.post(self.endpoint, json=request.to_wire(), headers=headers)
            resp.raise_for_status()
            body = resp.json()
        except httpx.TransportError as exc:
            raise GeneratorTransportError(f"generator unreachable at {self.endpoint}: {exc}") from exc
        except httpx.HTTPStatusError as exc:
            err = GeneratorTransportError if exc.response.status_code >= 500 else GeneratorError
            raise err(f"generator returned HTTP {exc.response.status_code}") from exc
        except ValueError as exc:
            raise GeneratorError(f"undecodable generator response: {exc}") from exc
        latency = (time.perf_counter() - t0) * 1e3
        H, W = request.shape
        if (body.get("height"), body.get("width")) != (H, W):
            raise ResolutionMismatchError(
                f"expected {W}x{H}, generator returned {body.get('width')}x{body.get('height')}")
        try:
            rgb = decode_rgb(body)
        except (KeyError, ValueError) as exc:
            raise GeneratorError(f"bad image payload: {exc}") from exc
        return GeneratedImage(rgb, request.digest(), self.name, latency)


def remote_generate(endpoint: str, request: GenerationRequest, **kwargs) -> GeneratedImage:
    gen = RemoteGenerator(endpoint, **kwargs)
    try:
        return gen.generate(request)
    finally:
        gen.close()
