"""Geometry-consistent synthetic visual data: terrain raycasting, reprojection flow,
keyframe-plus-warp frame stacks, generation plumbing and evaluation metrics."""

from .camera import (CameraIntrinsics, DepthMap, Pose, clip_depth, intrinsics_from_fov, look_at,
                     normalize_disparity, project, unproject, yaw_pitch_pose)
from .dim import FrameStack, assemble_stack, fill_holes, load_stack, save_stack, speedup_model, warp_frame
from .flow import FlowField, compute_flow, visibility_mask
from .generator import (GeneratedImage, GenerationRequest, RemoteGenerator, StubGenerator, build_request,
                        remote_generate, stub_render)
from .metrics import RolloutLog, fgr, x_displacement
from .prompts import PromptBatch, PromptPair, PromptPool, parse_prompt_batch, request_prompt_batch, sample_prompt
from .scene import SceneGeometry, TerrainSpec, build_terrain, raycast

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "DepthMap", "FlowField", "FrameStack", "GeneratedImage", "GenerationRequest", "Pose",
    "PromptBatch", "PromptPair", "PromptPool", "RemoteGenerator", "RolloutLog", "SceneGeometry", "StubGenerator",
    "TerrainSpec", "assemble_stack", "build_request", "build_terrain", "clip_depth", "compute_flow", "fgr",
    "fill_holes", "intrinsics_from_fov", "load_stack", "look_at", "normalize_disparity", "parse_prompt_batch",
    "project", "raycast", "remote_generate", "request_prompt_batch", "sample_prompt", "save_stack",
    "speedup_model", "stub_render", "unproject", "visibility_mask", "warp_frame", "x_displacement",
    "yaw_pitch_pose",
]
