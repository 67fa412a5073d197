"""Per-point features from six-plane depth projections of the cloud.

The cloud is normalized to the [-1, 1] cube, orthographically projected onto
the six cube faces as sparse depth images, pushed through a small
convolutional stack, and each point gathers its feature bilinearly from all
six maps (6 x feature_dim values per point).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .scene_io import PointCloud

# face table: (axis, sign); free axes in ascending order give (u, v)
FACES = [(0, +1), (0, -1), (1, +1), (1, -1), (2, +1), (2, -1)]

CLAMP_SLACK = 1e-6


class DegenerateCloudError(ValueError):
    pass


@dataclass
class NormTransform:
    """Isotropic map taking raw points into the canonical cube."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


@dataclass
class CubeProjection:
    depth_images: np.ndarray   # (6, R, R), 0 = empty, else depth in [0, 2]
    pixel_coords: np.ndarray   # (N, 6, 2) continuous (u, v) in [0, R]
    resolution: int


def normalize_cloud(cloud: PointCloud):
    """Center the bounding box at 0 and scale the largest half-extent to 1."""
    pts = cloud.points
    if len(pts) < 2:
        raise DegenerateCloudError("need at least 2 points to normalize")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float((hi - lo).max() / 2.0)
    if scale == 0.0:
        raise DegenerateCloudError("cloud has zero extent")
    transform = NormTransform(center=(lo + hi) / 2.0, scale=scale)
    return transform.apply(pts), transform


def project_to_planes(points: np.ndarray, resolution: int) -> CubeProjection:
    """Min-depth orthographic projection onto the six cube faces."""
    if resolution < 4:
        raise ValueError("projection resolution must be >= 4")
    pts = np.asarray(points, dtype=np.float64)
    over = np.abs(pts).max() - 1.0
    if over > CLAMP_SLACK:
        raise ValueError(f"points exceed the canonical cube by {over:.3e}")
    if over > 0:
        if over > 1e-12:   # more than normalization rounding
            warnings.warn("clamping points marginally outside the canonical cube")
        pts = np.clip(pts, -1.0, 1.0)
    n = len(pts)
    R = resolution
    images = np.full((6, R, R), np.inf)
    coords = np.empty((n, 6, 2))
    for f, (axis, sign) in enumerate(FACES):
        free = [a for a in range(3) if a != axis]
        depth = 1.0 - sign * pts[:, axis]          # distance from the face
        u = (pts[:, free[0]] + 1.0) / 2.0 * R
        v = (pts[:, free[1]] + 1.0) / 2.0 * R
        coords[:, f, 0] = u
        coords[:, f, 1] = v
        ui = np.clip(np.floor(u).astype(np.int64), 0, R - 1)
        vi = np.clip(np.floor(v).astype(np.int64), 0, R - 1)
        np.minimum.at(images[f], (vi, ui), depth)
    images[~np.isfinite(images)] = 0.0
    return CubeProjection(images.astype(np.float32), coords, R)


class DepthViewEncoder(nn.Module):
    """Initial residual-network stage over single-channel depth images.

    7x7 stride-2 conv, group norm, 3x3 stride-2 max pool, one residual
    block, then a 1x1 projection to feature_dim. Output spatial size is a
    quarter of the input.
    """

    def __init__(self, feature_dim: int = 128):
        super().__init__()
        self.feature_dim = feature_dim
        self.stem = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3)
        self.stem_norm = nn.GroupNorm(8, 64)
        self.pool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.block_conv1 = nn.Conv2d(64, 64, kernel_size=3, padding=1)
        self.block_norm1 = nn.GroupNorm(8, 64)
        self.block_conv2 = nn.Conv2d(64, 64, kernel_size=3, padding=1)
        self.block_norm2 = nn.GroupNorm(8, 64)
        self.project = nn.Conv2d(64, feature_dim, kernel_size=1)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, R, R) depth images, got {tuple(x.shape)}")
        if x.shape[-1] % 4 != 0 or x.shape[-2] % 4 != 0:
            raise ValueError("input resolution must be divisible by 4")
        h = self.act(self.stem_norm(self.stem(x)))
        h = self.pool(h)
        r = self.act(self.block_norm1(self.block_conv1(h)))
        r = self.block_norm2(self.block_conv2(r))
        h = self.act(h + r)
        return self.project(h)


def encode_views(proj: CubeProjection, encoder: DepthViewEncoder) -> torch.Tensor:
    """Run the six depth images through the shared encoder: (6, C, R/4, R/4)."""
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(proj.depth_images, dtype=dtype).unsqueeze(1)
    return encoder(x)


@dataclass
class PointFeatureSet:
    features: torch.Tensor     # (N, 6 * feature_dim)
    source_frame: int = 0


def bilinear_sample(fmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample a (C, S, S) map at continuous (u, v) positions, clamped at edges.

    Grid nodes sit at integer coordinates; an integral coordinate returns the
    node value exactly.
    """
    C, S, _ = fmap.shape
    u = coords[:, 0].clamp(0.0, S - 1.0)
    v = coords[:, 1].clamp(0.0, S - 1.0)
    u0 = u.floor().long().clamp(0, S - 1)
    v0 = v.floor().long().clamp(0, S - 1)
    u1 = (u0 + 1).clamp(max=S - 1)
    v1 = (v0 + 1).clamp(max=S - 1)
    wu = (u - u0.to(u.dtype)).unsqueeze(1)
    wv = (v - v0.to(v.dtype)).unsqueeze(1)
    rows = fmap.permute(1, 2, 0).reshape(S * S, C)
    f00 = rows[v0 * S + u0]
    f01 = rows[v0 * S + u1]
    f10 = rows[v1 * S + u0]
    f11 = rows[v1 * S + u1]
    top = f00 * (1 - wu) + f01 * wu
    bot = f10 * (1 - wu) + f11 * wu
    return top * (1 - wv) + bot * wv


def gather_point_features(proj: CubeProjection, maps: torch.Tensor,
                          source_frame: int = 0) -> PointFeatureSet:
    """Bilinear lookup of each point in all six maps, concatenated.

    Served by one fused grid_sample call over all faces; bilinear_sample is
    the reference the tests hold it against.
    """
    if maps.shape[0] != 6:
        raise ValueError("expected six feature maps")
    C, S = maps.shape[1], maps.shape[-1]
    if proj.resolution != 4 * S:
        raise ValueError("feature maps do not match the projection resolution")
    coords = torch.as_tensor(proj.pixel_coords, dtype=maps.dtype) / 4.0  # (N, 6, 2)
    n = coords.shape[0]
    # align_corners grid: pixel coordinate c in [0, S-1] maps to 2c/(S-1) - 1
    grid = coords.permute(1, 0, 2).unsqueeze(2) * (2.0 / (S - 1)) - 1.0  # (6, N, 1, 2)
    out = torch.nn.functional.grid_sample(
        maps, grid, mode="bilinear", padding_mode="border", align_corners=True
    )
    out = out[..., 0].permute(2, 0, 1)                                   # (N, 6, C)
    return PointFeatureSet(out.reshape(n, 6 * C), source_frame)


def sample_cloud(cloud: PointCloud, n_max: int, seed: int) -> PointCloud:
    """Uniform without-replacement subsample, identity when small enough."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if len(cloud) <= n_max:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(cloud), size=n_max, replace=False))
    return PointCloud(cloud.points[idx], cloud.frame_index, cloud.local_to_world)
