"""Synthetic driving-like scenes with an analytic ray-cast ground truth.

Scenes are built from axis-aligned boxes and rectangles with solid or checker
colors, so every ray intersection is exact. A camera trajectory drives
through the layout; per frame we render the oracle image and sample a
lidar-like point cloud (surface points below a height cutoff, within range,
visible from the camera).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import scene_io
from .scene_io import CameraView, Frame, PointCloud, Scene, SceneError

WORLD_UP = np.array([0.0, 1.0, 0.0])


class SceneSpecError(SceneError):
    """Invalid scene specification."""


# ---------------------------------------------------------------------------
# Primitives


@dataclass
class Checker:
    period: float
    color2: tuple

    def to_dict(self):
        return {"period": self.period, "color2": list(self.color2)}


@dataclass
class Rect:
    """Axis-aligned rectangle: the `axis` coordinate is fixed at `offset`."""

    axis: int
    offset: float
    lo: tuple     # bounds of the two free axes, in axis order
    hi: tuple
    color: tuple
    checker: Checker = None
    name: str = "rect"

    def __post_init__(self):
        self.free_axes = [a for a in range(3) if a != self.axis]

    def area(self) -> float:
        (a0, a1), (b0, b1) = zip(self.lo, self.hi)
        return abs(a1 - a0) * abs(b1 - b0)

    def intersect(self, origins, dirs):
        """Ray paramter t of the hit, +inf on miss."""
        d = dirs[:, self.axis]
        safe = np.where(d == 0.0, 1.0, d)
        t = (self.offset - origins[:, self.axis]) / safe
        t = np.where((d == 0.0) | (t <= 1e-9), np.inf, t)
        hit = origins + t[:, None] * dirs
        for k, ax in enumerate(self.free_axes):
            inside = (hit[:, ax] >= self.lo[k]) & (hit[:, ax] <= self.hi[k])
            t = np.where(inside, t, np.inf)
        return t

    def sample_surface(self, rng, n):
        pts = np.empty((n, 3))
        pts[:, self.axis] = self.offset
        for k, ax in enumerate(self.free_axes):
            pts[:, ax] = rng.uniform(self.lo[k], self.hi[k], size=n)
        return pts

    def color_at(self, points):
        points = np.atleast_2d(points)
        base = np.tile(np.asarray(self.color, dtype=np.float64), (len(points), 1))
        if self.checker is not None:
            a = np.floor(points[:, self.free_axes[0]] / self.checker.period)
            b = np.floor(points[:, self.free_axes[1]] / self.checker.period)
            alt = ((a + b) % 2).astype(bool)
            base[alt] = np.asarray(self.checker.color2, dtype=np.float64)
        return base

    def to_dict(self):
        out = {
            "type": "rect", "axis": self.axis, "offset": self.offset,
            "lo": list(self.lo), "hi": list(self.hi),
            "color": list(self.color), "name": self.name,
        }
        if self.checker:
            out["checker"] = self.checker.to_dict()
        return out


@dataclass
class Box:
    """Axis-aligned solid box."""

    lo: tuple
    hi: tuple
    color: tuple
    checker: Checker = None
    name: str = "box"

    def area(self) -> float:
        e = np.asarray(self.hi) - np.asarray(self.lo)
        return float(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))

    def intersect(self, origins, dirs):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        safe = np.where(dirs == 0.0, 1e-300, dirs)
        t1 = (lo - origins) / safe
        t2 = (hi - origins) / safe
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        t = np.where((tmax >= tmin) & (tmax > 1e-9), np.where(tmin > 1e-9, tmin, tmax), np.inf)
        return t

    def _faces(self):
        faces = []
        for axis in range(3):
            free = [a for a in range(3) if a != axis]
            lo2 = (self.lo[free[0]], self.lo[free[1]])
            hi2 = (self.hi[free[0]], self.hi[free[1]])
            for offset in (self.lo[axis], self.hi[axis]):
                faces.append(Rect(axis, offset, lo2, hi2, self.color, self.checker))
        return faces

    def sample_surface(self, rng, n):
        faces = self._faces()
        areas = np.array([f.area() for f in faces])
        counts = rng.multinomial(n, areas / areas.sum())
        parts = [f.sample_surface(rng, c) for f, c in zip(faces, counts) if c > 0]
        return np.concatenate(parts, axis=0)

    def color_at(self, points):
        points = np.atleast_2d(points)
        if self.checker is None:
            return np.tile(np.asarray(self.color, dtype=np.float64), (len(points), 1))
        # checker keyed on the face's free axes: use the axis the point sits on
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        dist_faces = np.minimum(np.abs(points - lo), np.abs(points - hi))
        axis = np.argmin(dist_faces, axis=1)
        out = np.empty((len(points), 3))
        for ax in range(3):
            sel = axis == ax
            if not sel.any():
                continue
            free = [a for a in range(3) if a != ax]
            rect = Rect(ax, 0.0, (0, 0), (0, 0), self.color, self.checker)
            out[sel] = rect.color_at(points[sel])
        return out

    def to_dict(self):
        out = {
            "type": "box", "lo": list(self.lo), "hi": list(self.hi),
            "color": list(self.color), "name": self.name,
        }
        if self.checker:
            out["checker"] = self.checker.to_dict()
        return out


def _primitive_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    checker = d.pop("checker", None)
    if checker is not None:
        checker = Checker(checker["period"], tuple(checker["color2"]))
    if kind == "rect":
        return Rect(d["axis"], d["offset"], tuple(d["lo"]), tuple(d["hi"]),
                    tuple(d["color"]), checker, d.get("name", "rect"))
    if kind == "box":
        return Box(tuple(d["lo"]), tuple(d["hi"]), tuple(d["color"]), checker,
                   d.get("name", "box"))
    raise SceneSpecError(f"unknown primitive type {kind!r}")


# ---------------------------------------------------------------------------
# Scene specification


@dataclass
class SceneSpec:
    layout: str = "corridor"          # corridor | curve | intersection
    extent: float = 40.0              # meters along the main direction
    n_frames: int = 40
    forward_step: float = 0.5         # meters per frame
    yaw_start: float = 0.0            # radians
    yaw_rate: float = 0.0             # radians per frame
    width: int = 80
    height: int = 60
    focal: float = 60.0               # pixels
    camera_height: float = 1.5
    points_per_frame: int = 5000
    noise_sigma: float = 0.0
    lidar_height: float = 3.0         # no points above this height
    lidar_range: float = 30.0         # no points farther than this
    sky_color: tuple = (0.35, 0.55, 0.85)
    camera_pitch: float = 0.0         # radians, positive looks up
    seed: int = 0
    primitives: list = field(default_factory=list)   # raw dicts; empty = layout default

    def __post_init__(self):
        if self.points_per_frame < 100:
            raise SceneSpecError("points_per_frame must be >= 100")
        if self.n_frames < 1:
            raise SceneSpecError("n_frames must be >= 1")
        if self.layout not in ("corridor", "curve", "intersection"):
            raise SceneSpecError(f"unknown layout {self.layout!r}")

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise SceneSpecError(f"{path}: invalid JSON ({e})") from e
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SceneSpecError(f"{path}: unknown keys {sorted(unknown)}")
        if "sky_color" in data:
            data["sky_color"] = tuple(data["sky_color"])
        return cls(**data)

    def to_json(self, path):
        data = dataclasses.asdict(self)
        data["sky_color"] = list(self.sky_color)
        with open(path, "w") as f:
            json.dump(data, f, indent=1, sort_keys=True)
            f.write("\n")

    def build_primitives(self) -> list:
        if self.primitives:
            return [_primitive_from_dict(d) for d in self.primitives]
        return _layout_primitives(self)

    def intrinsics(self) -> np.ndarray:
        return np.array(
            [[self.focal, 0.0, self.width / 2.0],
             [0.0, self.focal, self.height / 2.0],
             [0.0, 0.0, 1.0]]
        )


RED = (0.85, 0.15, 0.12)
GREEN = (0.15, 0.65, 0.25)
BLUE = (0.15, 0.3, 0.8)
YELLOW = (0.9, 0.8, 0.2)
GRAY = (0.55, 0.55, 0.55)
DARK = (0.25, 0.25, 0.3)
LIGHT = (0.85, 0.85, 0.8)


def _layout_primitives(spec: SceneSpec) -> list:
    L = spec.extent
    hw = 4.0                      # corridor half width
    wall_h = 6.0
    if spec.layout == "corridor":
        prims = [
            Rect(1, 0.0, (-hw, -2.0), (hw, L + 6.0), GRAY,
                 Checker(2.0, DARK), name="floor"),
            Rect(0, -hw, (0.0, -2.0), (wall_h, L + 6.0), LIGHT,
                 Checker(3.0, BLUE), name="wall_left"),
            Rect(0, hw, (0.0, -2.0), (wall_h, L + 6.0), LIGHT,
                 Checker(3.0, GREEN), name="wall_right"),
            Rect(2, L + 6.0, (-hw, 0.0), (hw, wall_h), YELLOW, name="wall_end"),
            Box((-hw + 0.4, 0.0, L * 0.3), (-hw + 1.4, 1.2, L * 0.3 + 1.0), RED, name="box_a"),
            Box((hw - 1.6, 0.0, L * 0.55), (hw - 0.4, 1.6, L * 0.55 + 1.2), BLUE, name="box_b"),
            Box((-1.5, 0.0, L * 0.8), (-0.5, 0.9, L * 0.8 + 1.0), GREEN, name="box_c"),
        ]
        return prims
    if spec.layout == "curve":
        half = L / 2.0 + 8.0
        prims = [
            Rect(1, 0.0, (-half, -half), (half, half), GRAY, Checker(2.0, DARK), name="floor"),
            Rect(0, -half, (0.0, -half), (wall_h, half), LIGHT, Checker(3.0, BLUE), name="wall_xlo"),
            Rect(0, half, (0.0, -half), (wall_h, half), LIGHT, Checker(3.0, GREEN), name="wall_xhi"),
            Rect(2, -half, (-half, 0.0), (half, wall_h), LIGHT, Checker(3.0, RED), name="wall_zlo"),
            Rect(2, half, (-half, 0.0), (half, wall_h), YELLOW, name="wall_zhi"),
            Box((-6.0, 0.0, 8.0), (-4.0, 2.0, 10.0), RED, name="box_a"),
            Box((4.0, 0.0, 14.0), (6.0, 1.5, 16.0), BLUE, name="box_b"),
        ]
        return prims
    # intersection: two crossing corridors
    arm = L / 2.0 + 6.0
    prims = [
        Rect(1, 0.0, (-arm, -arm), (arm, arm), GRAY, Checker(2.0, DARK), name="floor"),
        Rect(0, -hw, (0.0, -arm), (wall_h, -hw), LIGHT, Checker(3.0, BLUE), name="wall_a"),
        Rect(0, -hw, (0.0, hw), (wall_h, arm), LIGHT, Checker(3.0, BLUE), name="wall_b"),
        Rect(0, hw, (0.0, -arm), (wall_h, -hw), LIGHT, Checker(3.0, GREEN), name="wall_c"),
        Rect(0, hw, (0.0, hw), (wall_h, arm), LIGHT, Checker(3.0, GREEN), name="wall_d"),
        Rect(2, -hw, (-arm, 0.0), (-hw, wall_h), LIGHT, Checker(3.0, RED), name="wall_e"),
        Rect(2, -hw, (hw, 0.0), (arm, wall_h), LIGHT, Checker(3.0, RED), name="wall_f"),
        Rect(2, hw, (-arm, 0.0), (-hw, wall_h), YELLOW, name="wall_g"),
        Rect(2, hw, (hw, 0.0), (arm, wall_h), YELLOW, name="wall_h"),
    ]
    return prims


# ---------------------------------------------------------------------------
# Trajectory and cameras


def camera_pose(position, yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Camera-to-world with +Z forward, image v growing downward."""
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([np.sin(yaw) * cp, sp, np.cos(yaw) * cp])
    x_cam = np.cross(forward, WORLD_UP)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)
    y_cam /= np.linalg.norm(y_cam)
    pose = np.eye(4)
    pose[:3, 0] = x_cam
    pose[:3, 1] = y_cam
    pose[:3, 2] = forward
    pose[:3, 3] = np.asarray(position, dtype=np.float64)
    return pose


def trajectory_poses(spec: SceneSpec) -> list:
    if spec.layout == "corridor":
        start = np.array([0.0, spec.camera_height, 1.0])
    elif spec.layout == "curve":
        start = np.array([-spec.extent / 4.0, spec.camera_height, -spec.extent / 4.0])
    else:
        start = np.array([0.0, spec.camera_height, -spec.extent / 2.0])
    poses = []
    pos = start.copy()
    yaw = spec.yaw_start
    for i in range(spec.n_frames):
        poses.append(camera_pose(pos, yaw, spec.camera_pitch))
        heading = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        pos = pos + spec.forward_step * heading
        yaw += spec.yaw_rate
    return poses


def _check_trajectory(spec: SceneSpec, poses: list, prims: list):
    """Cameras must stay inside the wall-plane cell holding the start pose."""
    rects = [p for p in prims if isinstance(p, Rect) and p.axis != 1]
    if not rects:
        return
    start = poses[0][:3, 3]
    bounds = {}
    for axis in (0, 2):
        offs = [r.offset for r in rects if r.axis == axis]
        lo = max([o for o in offs if o <= start[axis]], default=-np.inf)
        hi = min([o for o in offs if o >= start[axis]], default=np.inf)
        bounds[axis] = (lo, hi)
    for pose in poses:
        c = pose[:3, 3]
        for axis in (0, 2):
            lo, hi = bounds[axis]
            if not (lo < c[axis] < hi):
                raise SceneSpecError(
                    f"trajectory exits layout at position {np.round(c, 2).tolist()}"
                )


# ---------------------------------------------------------------------------
# Oracle renderer


def trace_rays(prims, sky_color, origins, dirs):
    """Nearest-hit ray cast. Returns colors, hit t and primitive index (-1 = sky)."""
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(prims):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, i, best_idx)
    colors = np.tile(np.asarray(sky_color, dtype=np.float64), (n, 1))
    for i, prim in enumerate(prims):
        sel = best_idx == i
        if sel.any():
            hits = origins[sel] + best_t[sel, None] * dirs[sel]
            colors[sel] = prim.color_at(hits)
    return colors, best_t, best_idx


def render_oracle(spec: SceneSpec, camera: CameraView) -> np.ndarray:
    """Analytic per-pixel render: nearest primitive hit or sky."""
    from . import geometry

    prims = spec.build_primitives()
    pixels = geometry.pixel_grid(camera.width, camera.height)
    dirs = geometry.camera_ray_directions(camera, pixels)
    origins = np.tile(camera.center, (len(dirs), 1))
    colors, _, _ = trace_rays(prims, spec.sky_color, origins, dirs)
    return colors.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# Lidar-like point sampling


def _sample_frame_points(spec, prims, camera, rng) -> np.ndarray:
    """Visible surface points, area-uniform, below the lidar height cutoff.

    A candidate survives if its pixel's center ray hits the same primitive at
    the same depth, which keeps clouds and oracle images mutually consistent.
    """
    from . import geometry

    areas = np.array([p.area() for p in prims])
    weights = areas / areas.sum()
    want = spec.points_per_frame
    collected = []
    total = 0
    center = camera.center
    for _ in range(200):
        if total >= want:
            break
        batch = max(2048, 4 * (want - total))
        counts = rng.multinomial(batch, weights)
        cand, owner = [], []
        for idx, (prim, c) in enumerate(zip(prims, counts)):
            if c == 0:
                continue
            pts = prim.sample_surface(rng, c)
            cand.append(pts)
            owner.append(np.full(c, idx, dtype=np.int64))
        cand = np.concatenate(cand, axis=0)
        owner = np.concatenate(owner, axis=0)
        keep = cand[:, 1] <= spec.lidar_height
        dist = np.linalg.norm(cand - center, axis=1)
        keep &= dist <= spec.lidar_range
        keep &= dist > 1e-6
        cand, owner, dist = cand[keep], owner[keep], dist[keep]
        if len(cand) == 0:
            continue
        uv, depth = camera.project(cand)
        inside = (
            (depth > 1e-6)
            & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
        )
        cand, owner, uv = cand[inside], owner[inside], uv[inside]
        if len(cand) == 0:
            continue
        # visibility via the pixel-center ray the point lands in
        pix = np.floor(uv).astype(np.int64)
        dirs = geometry.camera_ray_directions(camera, pix)
        origins = np.tile(center, (len(dirs), 1))
        _, t_hit, idx_hit = trace_rays(prims, spec.sky_color, origins, dirs)
        t_point = np.linalg.norm(cand - center, axis=1)
        visible = (idx_hit == owner) & (np.abs(t_hit - t_point) <= 0.02 * np.maximum(t_point, 1.0))
        cand = cand[visible]
        if len(cand):
            collected.append(cand)
            total += len(cand)
    if total < want:
        raise SceneSpecError(
            f"frame {camera.frame_index}: only {total}/{want} visible lidar points; "
            "check lidar_range/lidar_height against the layout"
        )
    pts = np.concatenate(collected, axis=0)[:want]
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        norm = np.linalg.norm(noise, axis=1, keepdims=True)
        cap = 3.0 * spec.noise_sigma
        noise = np.where(norm > cap, noise * (cap / np.where(norm == 0, 1, norm)), noise)
        pts = pts + noise
    return pts


def generate_scene(spec: SceneSpec, out_dir) -> Scene:
    """Render, sample and write a full scene directory; returns the Scene."""
    prims = spec.build_primitives()
    poses = trajectory_poses(spec)
    _check_trajectory(spec, poses, prims)
    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics()
    frames = []
    for i, pose in enumerate(poses):
        camera = CameraView(K, pose, spec.width, spec.height, frame_index=i)
        image = render_oracle(spec, camera)
        pts_world = _sample_frame_points(spec, prims, camera, rng)
        # clouds live in the frame's camera frame (the sensor rig frame)
        pts_local = geometry_world_to_local(pose, pts_world)
        cloud = PointCloud(pts_local, frame_index=i, local_to_world=pose)
        frames.append(Frame(camera, image, cloud))
    scene = Scene(frames)
    os.makedirs(out_dir, exist_ok=True)
    scene_io.save_scene(out_dir, scene)
    spec.to_json(os.path.join(out_dir, "scene_spec.json"))
    return scene


def geometry_world_to_local(local_to_world: np.ndarray, points_world: np.ndarray):
    R, t = local_to_world[:3, :3], local_to_world[:3, 3]
    return (points_world - t) @ R
