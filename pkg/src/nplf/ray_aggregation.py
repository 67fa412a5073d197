"""Per-ray point selection and feature aggregation.

For every camera ray we pick the K in-frustum points with the smallest
orthogonal distance, describe each by its encoded feature plus ray-centric
geometry, and fuse the K descriptors into one ray feature, either with
multi-head attention or with the heuristic/naive baselines kept for the
aggregation ablation. Rays whose nearest point is farther than a scene-scale
threshold carry a learned far-field code instead of local context.

The selection hot loop can be served by a native kernel; set
NPLF_KERNEL=native to use it (NPLF_KERNEL=reference forces the numpy path).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import geometry
from .geometry import Ray
from .point_encoder import PointFeatureSet
from .scene_io import CameraView, PointCloud

FRUSTUM_MARGIN = 0.05
INV_DIST_EPS = 1e-4


def geo_encoding_dim(bands: int) -> int:
    """Width of gamma(theta) + gamma(psi) + gamma(distance)."""
    return 3 * 2 * (bands + 1)


def compute_d_inf(cloud: PointCloud, percentile: float = 99.0, seed: int = 0,
                  max_pairs: int = 1_000_000) -> float:
    """Robust scene scale: a percentile of pairwise point distances.

    Exhaustive over distinct pairs when N^2 fits the pair budget, otherwise
    estimated from uniformly sampled pairs (deterministic per seed).
    """
    pts = cloud.points
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    if n * n <= max_pairs:
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        iu = np.triu_indices(n, k=1)
        samples = dist[iu]
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n, size=max_pairs)
        keep = i != j
        samples = np.linalg.norm(pts[i[keep]] - pts[j[keep]], axis=1)
    return float(np.percentile(samples, percentile))


@dataclass
class RaySelection:
    """Geometry of the K selected points per ray.

    Rays with fewer than K in-frustum candidates are padded by repeating the
    nearest entry with the pad mask cleared; rays with none are flagged
    beyond_cloud and carry no valid entries.
    """

    indices: np.ndarray       # (R, K) int64, -1 where nothing was selected
    distances: np.ndarray     # (R, K) float64, ascending over valid entries
    theta: np.ndarray         # (R, K)
    psi: np.ndarray           # (R, K)
    mask: np.ndarray          # (R, K) bool
    beyond_cloud: np.ndarray  # (R,) bool
    up_fallback: np.ndarray   # (R,) bool

    @property
    def n_rays(self):
        return len(self.indices)

    @property
    def k(self):
        return self.indices.shape[1]


def _ray_arrays(rays):
    if isinstance(rays, Ray):
        rays = [rays]
    if isinstance(rays, (list, tuple)) and len(rays) == 2 and not isinstance(rays[0], Ray):
        origins, dirs = rays
        return np.atleast_2d(np.asarray(origins, dtype=np.float64)), \
            np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    return origins, dirs


def frustum_mask(points_world: np.ndarray, camera: CameraView,
                 margin: float = FRUSTUM_MARGIN) -> np.ndarray:
    """Points with positive camera depth projecting inside the padded bounds."""
    uv, z = camera.project(points_world)
    w, h = camera.width, camera.height
    return (
        (z > 0)
        & (uv[:, 0] >= -margin * w) & (uv[:, 0] <= (1 + margin) * w)
        & (uv[:, 1] >= -margin * h) & (uv[:, 1] <= (1 + margin) * h)
    )


def _top_k_by_distance(dist: np.ndarray, k: int):
    """Row-wise smallest-k indices ordered by (distance, index), exactly."""
    n_rows, m = dist.shape
    if k >= m:
        order = np.argsort(dist, axis=1, kind="stable")
        return order
    pad = min(m, k + 16)
    part = np.argpartition(dist, pad - 1, axis=1)[:, :pad]
    pd = np.take_along_axis(dist, part, axis=1)
    order = np.lexsort((part, pd), axis=1)
    cand = np.take_along_axis(part, order, axis=1)
    cand_d = np.take_along_axis(pd, order, axis=1)
    # exact tie handling: if ties at the k-th value might extend past the pad
    # window, fall back to a full stable sort for those rows
    kth = cand_d[:, k - 1]
    n_le = (dist <= kth[:, None]).sum(axis=1)
    risky = n_le > pad
    if risky.any():
        full = np.lexsort(
            (np.broadcast_to(np.arange(m), dist[risky].shape), dist[risky]), axis=1
        )
        cand = cand.copy()
        cand[risky, :] = full[:, :pad]
    return cand[:, :k]


def _reference_knn(origins_local, dirs_local, points_local, in_frustum, k):
    """Numpy selection: indices/distances of the k nearest in-frustum points."""
    cand_idx = np.flatnonzero(in_frustum)
    n_rays = len(origins_local)
    indices = np.full((n_rays, k), -1, dtype=np.int64)
    distances = np.zeros((n_rays, k))
    mask = np.zeros((n_rays, k), dtype=bool)
    if len(cand_idx) == 0:
        return indices, distances, mask
    pts = points_local[cand_idx]
    shared_origin = np.ptp(origins_local, axis=0).max() == 0.0
    if shared_origin:
        dist_sq = geometry.ray_point_distances_sq(origins_local[0], dirs_local, pts)
    else:
        dist_sq = np.empty((n_rays, len(pts)))
        for i in range(n_rays):
            dist_sq[i] = geometry.ray_point_distances_sq(
                origins_local[i], dirs_local[i:i + 1], pts)[0]
    k_eff = min(k, len(cand_idx))
    top = _top_k_by_distance(dist_sq, k_eff)[:, :k_eff]
    sel_dist = np.sqrt(np.take_along_axis(dist_sq, top, axis=1))
    sel_idx = cand_idx[top]
    indices[:, :k_eff] = sel_idx
    distances[:, :k_eff] = sel_dist
    mask[:, :k_eff] = True
    if k_eff < k:   # pad by repeating the nearest entry
        indices[:, k_eff:] = indices[:, :1]
        distances[:, k_eff:] = distances[:, :1]
    return indices, distances, mask


def select_k_closest(rays, cloud: PointCloud, camera: CameraView, k: int) -> RaySelection:
    """The K in-frustum points with smallest orthogonal ray distance.

    Ties break by point index. Angles use world coordinates; distances are
    computed in the cloud's local frame (they are rigid-invariant).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    origins_w, dirs_w = _ray_arrays(rays)
    world_pts = cloud.world_points()
    in_frustum = frustum_mask(world_pts, camera)

    R_l2w = cloud.local_to_world[:3, :3]
    t_l2w = cloud.local_to_world[:3, 3]
    origins_l = (origins_w - t_l2w) @ R_l2w
    dirs_l = dirs_w @ R_l2w

    backend = os.environ.get("NPLF_KERNEL", "reference")
    if backend == "native":
        from . import _native
        indices, distances, mask = _native.knn_rays(
            origins_l, dirs_l, cloud.points, camera, cloud.local_to_world, k
        )
    elif backend == "reference":
        indices, distances, mask = _reference_knn(
            origins_l, dirs_l, cloud.points, in_frustum, k
        )
    else:
        raise ValueError(f"unknown NPLF_KERNEL backend {backend!r}")

    beyond = ~mask.any(axis=1)
    sel_world = world_pts[np.clip(indices, 0, None)]
    theta, psi, fallback = geometry.ray_point_angles_batch(dirs_w, sel_world)
    return RaySelection(indices, distances, theta, psi, mask, beyond, fallback)


def empty_selection(rays) -> RaySelection:
    """Zero-point selection used by the K=0 ablation: every ray is beyond."""
    _, dirs = _ray_arrays(rays)
    n = len(dirs)
    zero = np.zeros((n, 0))
    return RaySelection(
        indices=np.zeros((n, 0), dtype=np.int64), distances=zero,
        theta=zero, psi=zero, mask=np.zeros((n, 0), dtype=bool),
        beyond_cloud=np.ones(n, dtype=bool), up_fallback=np.zeros(n, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Descriptors


@dataclass
class RayDescriptors:
    descriptors: torch.Tensor   # (R, K', D) with D = point_dim + 30 + 128
    mask: torch.Tensor          # (R, K') bool
    gate: torch.Tensor          # (R,) bool, far-field code active
    distances: torch.Tensor     # (R, K') for the heuristic weighting


def geometry_encoding(selection: RaySelection, bands: int) -> np.ndarray:
    """gamma(theta) + gamma(psi) + gamma(distance) per selected point."""
    parts = [
        geometry.positional_encode(selection.theta[..., None], bands),
        geometry.positional_encode(selection.psi[..., None], bands),
        geometry.positional_encode(selection.distances[..., None], bands),
    ]
    return np.concatenate(parts, axis=-1)


def gate_from_selection(selection: RaySelection, far_threshold: float) -> np.ndarray:
    """Far-field gate: no candidates at all, or nearest point past threshold."""
    dist = np.where(selection.mask, selection.distances, np.inf)
    nearest = dist.min(axis=1, initial=np.inf)
    return selection.beyond_cloud | (nearest > far_threshold)


def build_descriptors(selection: RaySelection, features: PointFeatureSet,
                      params: "RayAttention", bands: int = 4) -> RayDescriptors:
    """Concatenate point feature, encoded geometry and the far-field block.

    Beyond-cloud rays collapse to a single valid entry holding zeros for the
    feature/geometry part and the far-field code, so the attention input is
    never empty.
    """
    feats = features.features
    dtype = feats.dtype
    n_rays, k = selection.indices.shape
    point_dim = feats.shape[1]
    gate = torch.as_tensor(gate_from_selection(selection, float(params.far_threshold)))
    beyond = torch.as_tensor(selection.beyond_cloud)

    if k == 0:
        k_out = 1
        local = torch.zeros((n_rays, 1, point_dim + geo_encoding_dim(bands)), dtype=dtype)
        mask = torch.ones((n_rays, 1), dtype=torch.bool)
        dists = torch.zeros((n_rays, 1), dtype=dtype)
    else:
        k_out = k
        idx = torch.as_tensor(np.clip(selection.indices, 0, None), dtype=torch.long)
        keep = (~beyond)[:, None, None].to(dtype)
        point_part = feats[idx] * keep
        geo_part = torch.as_tensor(geometry_encoding(selection, bands), dtype=dtype) * keep
        local = torch.cat([point_part, geo_part], dim=2)
        mask = torch.as_tensor(selection.mask).clone()
        mask[beyond, 0] = True   # beyond rays keep one slot for the far code
        dists = torch.as_tensor(selection.distances, dtype=dtype)
    far = params.far_code.to(dtype).view(1, 1, -1).expand(n_rays, k_out, params.code_dim)
    far = far * gate[:, None, None].to(dtype)
    desc = torch.cat([local, far], dim=2)
    return RayDescriptors(desc, mask, gate, dists)


# ---------------------------------------------------------------------------
# Attention and baselines


def _two_layer(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class RayAttention(nn.Module):
    """Multi-head key/value/query aggregation of point descriptors per ray.

    Keys and values come from the point descriptors, the query from the
    positionally encoded ray direction. far_threshold is derived from the
    scene (not learned); far_code is the learned global feature used past it.
    """

    def __init__(self, point_dim: int = 768, hidden: int = 256, out_dim: int = 128,
                 n_heads: int = 8, bands: int = 4):
        super().__init__()
        if out_dim % n_heads:
            raise ValueError("out_dim must divide evenly into heads")
        self.point_dim = point_dim
        self.geo_dim = geo_encoding_dim(bands)
        self.code_dim = out_dim
        self.descriptor_dim = point_dim + self.geo_dim + self.code_dim
        self.n_heads = n_heads
        self.head_dim = out_dim // n_heads
        self.out_dim = out_dim
        # the encoded direction has the same width as the geometry block
        self.key_map = _two_layer(self.descriptor_dim, hidden, out_dim)
        self.value_map = _two_layer(self.descriptor_dim, hidden, out_dim)
        self.query_map = _two_layer(self.geo_dim, hidden, out_dim)
        self.out_proj = nn.Linear(out_dim, out_dim)
        self.far_code = nn.Parameter(torch.zeros(self.code_dim))
        self.register_buffer("far_threshold", torch.tensor(float("inf")))

    def _heads(self, x):
        return x.reshape(*x.shape[:-1], self.n_heads, self.head_dim)

    def attention_weights(self, query, keys, mask):
        """Per-head softmax over the K entries; masked slots get zero weight."""
        q = self._heads(query)                              # (R, h, hd)
        k = self._heads(keys).permute(0, 2, 1, 3)           # (R, h, K, hd)
        scores = torch.einsum("rhd,rhkd->rhk", q, k) / np.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def attend(self, dirs_encoded: torch.Tensor, descriptors: torch.Tensor,
               mask: torch.Tensor) -> torch.Tensor:
        """Aggregate descriptors into one feature per ray."""
        if not mask.any(dim=1).all():
            raise ValueError("some rays have no valid descriptor entries")
        keys = self.key_map(descriptors)
        values = self.value_map(descriptors)
        query = self.query_map(dirs_encoded)
        attn = self.attention_weights(query, keys, mask)    # (R, h, K)
        v = self._heads(values).permute(0, 2, 1, 3)         # (R, h, K, hd)
        mixed = torch.einsum("rhk,rhkd->rhd", attn, v)
        return self.out_proj(mixed.reshape(len(descriptors), self.out_dim))

    def heuristic(self, descriptors: torch.Tensor, distances: torch.Tensor,
                  mask: torch.Tensor, mode: str) -> torch.Tensor:
        """Ablation baselines: inverse-distance weighting or a naive sum."""
        values = self.value_map(descriptors)
        valid = mask.to(values.dtype)
        if mode == "inverse_distance":
            w = valid / (distances + INV_DIST_EPS)
            w = w / w.sum(dim=1, keepdim=True).clamp_min(1e-12)
        elif mode == "naive_sum":
            w = valid
        else:
            raise ValueError(f"unknown heuristic mode {mode!r}")
        return (values * w[..., None]).sum(dim=1)


def attend(ray_dirs, descriptors: RayDescriptors, params: RayAttention,
           bands: int = 4) -> torch.Tensor:
    """Functional wrapper: raw world directions in, ray features out."""
    dirs = np.atleast_2d(np.asarray(ray_dirs, dtype=np.float64))
    enc = torch.as_tensor(geometry.positional_encode(dirs, bands),
                          dtype=descriptors.descriptors.dtype)
    return params.attend(enc, descriptors.descriptors, descriptors.mask)


def aggregate_heuristic(descriptors: RayDescriptors, distances, mode: str,
                        params: RayAttention) -> torch.Tensor:
    dists = torch.as_tensor(np.asarray(distances),
                            dtype=descriptors.descriptors.dtype)
    return params.heuristic(descriptors.descriptors, dists, descriptors.mask, mode)
