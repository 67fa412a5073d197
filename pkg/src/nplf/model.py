"""The assembled network: cloud encoding, ray aggregation, radiance head.

forward_rays is the one pipeline every render and training step goes
through; it evaluates the radiance head exactly once per ray. The fused path
computes the same function as build_descriptors + attend but splits the
first key/value layer over the concatenation blocks, so per-point work is
done once per point instead of once per (ray, point) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry, light_field, point_encoder, ray_aggregation
from .light_field import LightFieldHead
from .point_encoder import DepthViewEncoder, PointFeatureSet
from .ray_aggregation import RayAttention, RaySelection, gate_from_selection
from .scene_io import CameraView, PointCloud, RunConfig


def direction_encoding_dim(bands: int) -> int:
    return 3 * 2 * (bands + 1)


@dataclass
class RayBatchInfo:
    """Telemetry of one forward pass."""

    n_rays: int
    gate_count: int          # rays served by the far-field code
    up_fallback_count: int   # rays that needed the up-axis fallback
    gate_mask: np.ndarray    # (R,) bool


class PointLightField(torch.nn.Module):
    """Full model; submodules are the three learnable parameter groups."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        C = config.feature_dim
        self.encoder = DepthViewEncoder(C)
        self.attention = RayAttention(
            point_dim=6 * C,
            hidden=256,
            out_dim=C,
            n_heads=config.n_heads,
            bands=config.pe_bands,
        )
        self.head = LightFieldHead(
            feature_dim=C, direction_dim=direction_encoding_dim(config.pe_bands)
        )

    # -- cloud encoding -----------------------------------------------------

    def encode_cloud(self, cloud: PointCloud) -> PointFeatureSet:
        normalized, _ = point_encoder.normalize_cloud(cloud)
        proj = point_encoder.project_to_planes(normalized, self.config.projection_resolution)
        maps = point_encoder.encode_views(proj, self.encoder)
        return point_encoder.gather_point_features(proj, maps, cloud.frame_index)

    # -- ray aggregation ----------------------------------------------------

    def select(self, rays, cloud: PointCloud, camera: CameraView) -> RaySelection:
        if self.config.k_closest == 0:
            return ray_aggregation.empty_selection(rays)
        return ray_aggregation.select_k_closest(rays, cloud, camera, self.config.k_closest)

    def _encode_dirs(self, dirs_np: np.ndarray, dtype) -> torch.Tensor:
        enc = geometry.positional_encode(dirs_np, self.config.pe_bands)
        return torch.as_tensor(enc, dtype=dtype)

    def ray_features_explicit(self, dirs_np, selection, features,
                              aggregation: str = None) -> torch.Tensor:
        """Reference path through the full-width descriptors."""
        mode = aggregation or self.config.aggregation
        desc = ray_aggregation.build_descriptors(
            selection, features, self.attention, self.config.pe_bands
        )
        if mode == "attention":
            enc = self._encode_dirs(dirs_np, desc.descriptors.dtype)
            return self.attention.attend(enc, desc.descriptors, desc.mask)
        return self.attention.heuristic(desc.descriptors, desc.distances, desc.mask, mode)

    def _fused_first_layer(self, linear, point_first, geo, idx, keep, gate_f):
        """W @ concat(point, geo, far) + b via per-block matmuls."""
        att = self.attention
        W, b = linear.weight, linear.bias
        P, G = att.point_dim, att.geo_dim
        far = F.linear(att.far_code, W[:, P + G:])            # (H,)
        out = far[None, None, :] * gate_f[:, None, None] + b  # (R, 1, H)
        if point_first is not None:
            local = point_first[idx] + torch.einsum("rkg,hg->rkh", geo, W[:, P:P + G])
            out = out + local * keep
        return out

    def ray_features_fused(self, dirs_np, selection: RaySelection,
                           features: PointFeatureSet,
                           aggregation: str = None) -> torch.Tensor:
        att = self.attention
        mode = aggregation or self.config.aggregation
        feats = features.features
        dtype = feats.dtype
        n_rays, k = selection.indices.shape
        gate_np = gate_from_selection(selection, float(att.far_threshold))
        gate_f = torch.as_tensor(gate_np).to(dtype)

        if k > 0:
            geo = torch.as_tensor(
                ray_aggregation.geometry_encoding(selection, self.config.pe_bands),
                dtype=dtype,
            )
            idx = torch.as_tensor(np.clip(selection.indices, 0, None), dtype=torch.long)
            beyond = torch.as_tensor(selection.beyond_cloud)
            keep = (~beyond)[:, None, None].to(dtype)
            mask = torch.as_tensor(selection.mask).clone()
            mask[beyond, 0] = True
            dists = torch.as_tensor(selection.distances, dtype=dtype)
        else:
            geo, idx, keep = None, None, None
            mask = torch.ones((n_rays, 1), dtype=torch.bool)
            dists = torch.zeros((n_rays, 1), dtype=dtype)

        P = att.point_dim

        def maps_forward(two_layer):
            first, second = two_layer[0], two_layer[2]
            point_first = feats @ first.weight[:, :P].T if k > 0 else None
            h = self._fused_first_layer(first, point_first, geo, idx, keep, gate_f)
            return second(torch.relu(h))

        values = maps_forward(att.value_map)                 # (R, K', out)
        if mode == "attention":
            keys = maps_forward(att.key_map)
            query = att.query_map(self._encode_dirs(dirs_np, dtype))
            attn = att.attention_weights(query, keys, mask)
            v = att._heads(values).permute(0, 2, 1, 3)
            mixed = torch.einsum("rhk,rhkd->rhd", attn, v)
            return att.out_proj(mixed.reshape(n_rays, att.out_dim))
        valid = mask.to(dtype)
        if mode == "inverse_distance":
            w = valid / (dists + ray_aggregation.INV_DIST_EPS)
            w = w / w.sum(dim=1, keepdim=True).clamp_min(1e-12)
        elif mode == "naive_sum":
            w = valid
        else:
            raise ValueError(f"unknown aggregation {mode!r}")
        return (values * w[..., None]).sum(dim=1)

    # -- full pipeline ------------------------------------------------------

    def forward_rays(self, rays, cloud: PointCloud, camera: CameraView,
                     features: PointFeatureSet, aggregation: str = None,
                     fused: bool = True):
        """Colors for a ray batch; exactly one radiance evaluation per ray."""
        origins, dirs = ray_aggregation._ray_arrays(rays)
        selection = self.select((origins, dirs), cloud, camera)
        if fused:
            ray_feat = self.ray_features_fused(dirs, selection, features, aggregation)
        else:
            ray_feat = self.ray_features_explicit(dirs, selection, features, aggregation)
        enc = self._encode_dirs(dirs, ray_feat.dtype)
        colors = self.head(enc, ray_feat)
        gate = gate_from_selection(selection, float(self.attention.far_threshold))
        info = RayBatchInfo(
            n_rays=len(dirs),
            gate_count=int(gate.sum()),
            up_fallback_count=int(selection.up_fallback.sum()),
            gate_mask=gate,
        )
        return colors, info

    @torch.no_grad()
    def render_image(self, camera: CameraView, cloud: PointCloud,
                     chunk: int = 8192, sample_seed: int = None):
        """Render every pixel; returns the image and the far-field gate mask."""
        seed = self.config.seed if sample_seed is None else sample_seed
        cloud_s = point_encoder.sample_cloud(cloud, self.config.n_sample_points, seed)
        features = self.encode_cloud(cloud_s)
        pixels = geometry.pixel_grid(camera.width, camera.height)
        dirs = geometry.camera_ray_directions(camera, pixels)
        origins = np.tile(camera.center, (len(dirs), 1))
        colors = np.empty((len(dirs), 3))
        gate = np.empty(len(dirs), dtype=bool)
        for lo in range(0, len(dirs), chunk):
            hi = min(lo + chunk, len(dirs))
            c, info = self.forward_rays(
                (origins[lo:hi], dirs[lo:hi]), cloud_s, camera, features
            )
            colors[lo:hi] = c.detach().cpu().numpy()
            gate[lo:hi] = info.gate_mask
        H, W = camera.height, camera.width
        return colors.reshape(H, W, 3), gate.reshape(H, W)
