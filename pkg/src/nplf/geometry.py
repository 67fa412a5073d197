"""Pinhole ray generation and ray/point geometry.

All functions here are pure numpy and operate in float64. The learnable model
consumes their outputs as constants, so nothing in this module needs autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Global up axis of the world frame. Rays parallel to it fall back to the X
# axis when building the radial-angle projection plane.
WORLD_UP = np.array([0.0, 1.0, 0.0])
UP_FALLBACK_AXIS = np.array([1.0, 0.0, 0.0])
UP_DEGENERACY_EPS = 1e-8


@dataclass
class Ray:
    """A single camera ray with pixel provenance."""

    origin: np.ndarray      # (3,) meters, world frame
    direction: np.ndarray   # (3,) unit norm
    pixel: tuple            # (u, v) integer pixel indices
    frame_index: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit norm, got |d|={n!r}")


def pixel_grid(width: int, height: int) -> np.ndarray:
    """All (u, v) pixel indices of an image, row major (v outer, u inner)."""
    uu, vv = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def camera_ray_directions(camera, pixels: np.ndarray) -> np.ndarray:
    """World-frame unit directions through the given pixel centers.

    Pixel centers sit at (u + 0.5, v + 0.5). The camera looks down +Z in its
    local frame.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim == 1:
        pixels = pixels[None]
    u = pixels[:, 0].astype(np.float64) + 0.5
    v = pixels[:, 1].astype(np.float64) + 0.5
    K = camera.intrinsics
    fx, fy = K[0, 0], K[1, 1]
    cx, cy = K[0, 2], K[1, 2]
    skew = K[0, 1]
    y = (v - cy) / fy
    x = (u - cx - skew * y) / fx
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    dirs_world = dirs_cam @ camera.rotation.T
    dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
    return dirs_world


def generate_rays(camera, pixels=None) -> list:
    """One ray per requested pixel (default: every pixel of the sensor)."""
    if pixels is None:
        pixels = pixel_grid(camera.width, camera.height)
    pixels = np.asarray(pixels)
    if pixels.ndim == 1:
        pixels = pixels[None]
    bad = (
        (pixels[:, 0] < 0)
        | (pixels[:, 0] >= camera.width)
        | (pixels[:, 1] < 0)
        | (pixels[:, 1] >= camera.height)
    )
    if bad.any():
        raise ValueError(
            f"pixel {tuple(pixels[np.argmax(bad)])} outside "
            f"[0,{camera.width})x[0,{camera.height})"
        )
    dirs = camera_ray_directions(camera, pixels)
    origin = camera.center
    return [
        Ray(origin.copy(), d, (int(p[0]), int(p[1])), camera.frame_index)
        for d, p in zip(dirs, pixels)
    ]


def ray_point_distance(ray: Ray, point) -> tuple:
    """Cosine of the ray/point angle and the orthogonal point-to-line distance.

    The distance is sin(phi) * |x - o|, i.e. the shortest distance from the
    point to the infinite line carrying the ray. A point sitting exactly on
    the origin gets distance 0 and cos_phi 1 by convention.
    """
    point = np.asarray(point, dtype=np.float64)
    diff = point - ray.origin
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        return 1.0, 0.0
    cos_phi = float(np.clip(np.dot(ray.direction, diff / norm), -1.0, 1.0))
    sin_phi = np.sqrt(max(0.0, 1.0 - cos_phi * cos_phi))
    return cos_phi, float(sin_phi * norm)


def ray_point_distances(origin, directions, points):
    """Batched orthogonal distances from one shared origin.

    directions: (R, 3) unit vectors, points: (N, 3).
    Returns (cos_phi, distance) both of shape (R, N).
    """
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    diff = points - origin                      # (N, 3)
    norms = np.linalg.norm(diff, axis=1)        # (N,)
    proj = directions @ diff.T                  # (R, N)
    safe = np.where(norms == 0.0, 1.0, norms)
    cos_phi = np.clip(proj / safe, -1.0, 1.0)
    cos_phi = np.where(norms == 0.0, 1.0, cos_phi)
    dist_sq = np.maximum(norms**2 - proj**2, 0.0)
    return cos_phi, np.sqrt(dist_sq)


def ray_point_distances_sq(origin, directions, points):
    """Squared orthogonal distances only, with in-place temporaries.

    Same ordering as ray_point_distances (squaring is monotone), used by the
    selection hot loop where the cosine is not needed.
    """
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    diff = points - origin
    norms_sq = np.einsum("nj,nj->n", diff, diff)
    proj = directions @ diff.T                  # (R, N)
    np.multiply(proj, proj, out=proj)
    np.subtract(norms_sq[None, :], proj, out=proj)
    np.maximum(proj, 0.0, out=proj)
    return proj


def _projection_plane_axes(directions):
    """Per-ray orthonormal axes (y_j, d x y_j) of the radial projection plane.

    y_j is the world up axis with its component along the ray removed. Rays
    parallel to up fall back to the global X axis; the returned flag marks
    those rays.
    """
    directions = np.asarray(directions, dtype=np.float64)
    single = directions.ndim == 1
    d = np.atleast_2d(directions)
    y = WORLD_UP - (d @ WORLD_UP)[:, None] * d
    norms = np.linalg.norm(y, axis=1)
    fallback = norms < UP_DEGENERACY_EPS
    if fallback.any():
        alt = UP_FALLBACK_AXIS - (d @ UP_FALLBACK_AXIS)[:, None] * d
        y = np.where(fallback[:, None], alt, y)
        norms = np.linalg.norm(y, axis=1)
    y /= norms[:, None]
    cross = np.cross(d, y)
    if single:
        return y[0], cross[0], bool(fallback[0])
    return y, cross, fallback


def ray_point_angles(direction, point) -> tuple:
    """Angular coordinates (theta, psi) of a world point relative to a ray.

    theta is the angle between the ray direction and the point's direction
    from the world origin. psi is atan2 of the point's coordinates in the
    plane spanned by (y_j, d x y_j). Both use world coordinates; the third
    return value flags the up-axis fallback for near-vertical rays.
    """
    direction = np.asarray(direction, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    norm = np.linalg.norm(point)
    if norm == 0.0:
        raise ValueError("point at the world origin has no angular coordinates")
    theta = float(np.arccos(np.clip(np.dot(direction, point / norm), -1.0, 1.0)))
    y_axis, cross_axis, fallback = _projection_plane_axes(direction)
    x_proj = float(np.dot(y_axis, point))
    y_proj = float(np.dot(cross_axis, point))
    psi = float(np.arctan2(x_proj, y_proj))
    return theta, psi, fallback


def ray_point_angles_batch(directions, points):
    """theta/psi for per-ray point sets.

    directions: (R, 3), points: (R, K, 3) world coordinates.
    Returns theta, psi of shape (R, K) and the per-ray fallback flags.
    """
    directions = np.asarray(directions, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    norms = np.linalg.norm(points, axis=2)
    safe = np.where(norms < 1e-300, 1.0, norms)
    unit = points / safe[..., None]
    cos_theta = np.clip(np.einsum("rj,rkj->rk", directions, unit), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    y_axis, cross_axis, fallback = _projection_plane_axes(directions)
    x_proj = np.einsum("rj,rkj->rk", y_axis, points)
    y_proj = np.einsum("rj,rkj->rk", cross_axis, points)
    psi = np.arctan2(x_proj, y_proj)
    return theta, psi, fallback


def positional_encode(values, bands: int) -> np.ndarray:
    """Sinusoidal lifting: [sin(2^t pi s), cos(2^t pi s)] for t = 0..bands.

    Scalars map to 2*(bands+1) values; arrays are encoded per component along
    the last axis (a 3-vector gives 30 values at bands=4).
    """
    if bands < 0:
        raise ValueError("bands must be >= 0")
    v = np.asarray(values, dtype=np.float64)
    scalar_in = v.ndim == 0
    if scalar_in:
        v = v[None]
    freqs = (2.0 ** np.arange(bands + 1)) * np.pi
    phase = v[..., None] * freqs                       # (..., n, T+1)
    enc = np.stack([np.sin(phase), np.cos(phase)], axis=-1)
    out = enc.reshape(v.shape[:-1] + (v.shape[-1] * 2 * (bands + 1),))
    return out


def rigid_transform_rays(transform, origins, directions):
    """Apply a 4x4 rigid transform to ray origins and directions."""
    transform = np.asarray(transform, dtype=np.float64)
    R, t = transform[:3, :3], transform[:3, 3]
    return origins @ R.T + t, directions @ R.T


def transform_points(transform, points):
    transform = np.asarray(transform, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    return points @ transform[:3, :3].T + transform[:3, 3]
