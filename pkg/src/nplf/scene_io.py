"""Scene data model, on-disk formats and run configuration.

A scene directory looks like::

    scene.json              version, shared intrinsics/sensor size, frame list
    images/frame_%04d.png   8-bit RGB
    points/frame_%04d.ply   ASCII PLY with float x y z properties

Poses are 16 row-major reals (camera-to-world), intrinsics 9 row-major reals.
Images load as H x W x 3 reals in [0, 1] (plain division by 255, no gamma).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SCENE_FORMAT_VERSION = 1

ORTHONORMAL_TOL = 1e-6


class SceneError(Exception):
    """Base class for scene loading/validation failures."""


class SceneFormatError(SceneError):
    """Corrupt or incomplete scene directory."""


class PoseValidationError(SceneError):
    """A pose failed the rigid-transform checks."""


class ConfigError(Exception):
    """Bad run configuration file."""


def _check_rotation(R: np.ndarray, what: str):
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err >= ORTHONORMAL_TOL:
        raise PoseValidationError(f"{what}: rotation not orthonormal (|R'R - I| = {err:.2e})")
    if np.linalg.det(R) < 0:
        raise PoseValidationError(f"{what}: rotation has negative determinant (reflection)")


@dataclass
class CameraView:
    """Pinhole camera: intrinsics, camera-to-world pose and sensor size."""

    intrinsics: np.ndarray   # (3, 3), pixels
    cam_to_world: np.ndarray  # (4, 4) rigid
    width: int
    height: int
    frame_index: int = 0
    allow_skew: bool = False

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.intrinsics.shape != (3, 3) or self.cam_to_world.shape != (4, 4):
            raise PoseValidationError("intrinsics must be 3x3 and pose 4x4")
        if self.width < 1 or self.height < 1:
            raise PoseValidationError("sensor dimensions must be >= 1")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise PoseValidationError("focal entries must be positive")
        if not self.allow_skew and self.intrinsics[0, 1] != 0.0:
            raise PoseValidationError("nonzero skew (pass allow_skew=True to permit)")
        _check_rotation(self.cam_to_world[:3, :3], f"frame {self.frame_index}")

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def world_to_cam(self) -> np.ndarray:
        R, t = self.rotation, self.center
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    def project(self, points_world: np.ndarray):
        """Project world points; returns continuous (u, v) and camera depth."""
        pts = np.asarray(points_world, dtype=np.float64)
        cam = pts @ self.rotation + (self.world_to_cam[:3, 3])
        # equivalent to world_to_cam applied row-wise
        z = cam[:, 2]
        safe = np.where(z == 0.0, 1.0, z)
        proj = cam @ self.intrinsics.T
        return proj[:, :2] / safe[:, None], z


@dataclass
class PointCloud:
    """Per-frame point capture in its own local sensor frame."""

    points: np.ndarray            # (N, 3) meters
    frame_index: int = 0
    local_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.local_to_world = np.asarray(self.local_to_world, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise SceneError("point cloud must be a nonempty (N, 3) array")
        if not np.isfinite(self.points).all():
            raise SceneError("point cloud contains non-finite coordinates")

    def world_points(self) -> np.ndarray:
        R, t = self.local_to_world[:3, :3], self.local_to_world[:3, 3]
        return self.points @ R.T + t

    def __len__(self):
        return len(self.points)


@dataclass
class Frame:
    camera: CameraView
    image: np.ndarray     # (H, W, 3) in [0, 1]
    cloud: PointCloud


TRAIN, HOLDOUT = "train", "holdout"


@dataclass
class Scene:
    """Ordered posed frames with per-frame clouds and a train/holdout split."""

    frames: list
    split: list = None

    def __post_init__(self):
        if self.split is None:
            self.split = [TRAIN] * len(self.frames)
        if len(self.split) != len(self.frames):
            raise SceneError("split flags must match the frame count")
        if self.frames and TRAIN not in self.split:
            raise SceneError("train split is empty")
        dims = {(f.camera.width, f.camera.height) for f in self.frames}
        if len(dims) > 1:
            raise SceneError("all frames must share image dimensions")
        intr = {tuple(np.round(f.camera.intrinsics, 12).ravel()) for f in self.frames}
        if len(intr) > 1:
            raise SceneError("all frames must share intrinsics")

    def train_indices(self):
        return [i for i, s in enumerate(self.split) if s == TRAIN]

    def holdout_indices(self):
        return [i for i, s in enumerate(self.split) if s == HOLDOUT]

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# ASCII PLY (x y z float properties only)

def write_ply(path, points: np.ndarray):
    points = np.asarray(points, dtype=np.float64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    # repr() round-trips float64 exactly, keeping save/load byte-stable
    for p in points:
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    with open(path) as f:
        header = []
        line = f.readline().strip()
        if line != "ply":
            raise SceneFormatError(f"{path}: not a PLY file")
        while line != "end_header":
            line = f.readline()
            if not line:
                raise SceneFormatError(f"{path}: truncated PLY header")
            line = line.strip()
            header.append(line)
        n = None
        for h in header:
            if h.startswith("element vertex"):
                n = int(h.split()[-1])
        if n is None:
            raise SceneFormatError(f"{path}: missing vertex element")
        data = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if data.shape != (n, 3):
        raise SceneFormatError(f"{path}: expected {n} x/y/z rows, got {data.shape}")
    return data


def write_image(path, image: np.ndarray):
    """Store an [0,1] float image as 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Scene directory

def save_scene(path, scene: Scene):
    """Write a Scene in the standard directory layout."""
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "points"), exist_ok=True)
    first = scene.frames[0].camera
    frames_meta = []
    for frame in scene.frames:
        i = frame.camera.frame_index
        image_rel = f"images/frame_{i:04d}.png"
        points_rel = f"points/frame_{i:04d}.ply"
        write_image(os.path.join(path, image_rel), frame.image)
        write_ply(os.path.join(path, points_rel), frame.cloud.points)
        frames_meta.append(
            {
                "frame_index": i,
                "pose": [float(x) for x in frame.camera.cam_to_world.ravel()],
                "image": image_rel,
                "points": points_rel,
            }
        )
    meta = {
        "version": SCENE_FORMAT_VERSION,
        "intrinsics": [float(x) for x in first.intrinsics.ravel()],
        "width": first.width,
        "height": first.height,
        "frames": frames_meta,
    }
    with open(os.path.join(path, "scene.json"), "w") as f:
        json.dump(meta, f, indent=1)
        f.write("\n")


def load_scene(path) -> Scene:
    """Load a scene directory; frames come back sorted by frame_index."""
    meta_path = os.path.join(path, "scene.json")
    if not os.path.exists(meta_path):
        raise SceneFormatError(f"{path}: missing scene.json")
    with open(meta_path) as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{meta_path}: invalid JSON ({e})") from e
    if meta.get("version") != SCENE_FORMAT_VERSION:
        raise SceneFormatError(
            f"{meta_path}: unsupported version {meta.get('version')!r}"
        )
    for key in ("intrinsics", "width", "height", "frames"):
        if key not in meta:
            raise SceneFormatError(f"{meta_path}: missing key {key!r}")
    intrinsics = np.array(meta["intrinsics"], dtype=np.float64).reshape(3, 3)
    width, height = int(meta["width"]), int(meta["height"])
    frames = []
    for entry in sorted(meta["frames"], key=lambda e: e["frame_index"]):
        idx = int(entry["frame_index"])
        pose = np.array(entry["pose"], dtype=np.float64).reshape(4, 4)
        image_path = os.path.join(path, entry["image"])
        points_path = os.path.join(path, entry["points"])
        for p in (image_path, points_path):
            if not os.path.exists(p):
                raise SceneFormatError(f"frame {idx}: missing file {p}")
        camera = CameraView(intrinsics, pose, width, height, frame_index=idx)
        image = read_image(image_path)
        if image.shape != (height, width, 3):
            raise SceneFormatError(
                f"frame {idx}: image is {image.shape}, expected {(height, width, 3)}"
            )
        cloud = PointCloud(read_ply(points_path), frame_index=idx, local_to_world=pose)
        frames.append(Frame(camera, image, cloud))
    if not frames:
        raise SceneFormatError(f"{path}: scene has no frames")
    return Scene(frames)


def split_frames(scene: Scene, holdout_fraction: float, seed: int) -> Scene:
    """Assign evenly spaced holdout frames along the trajectory.

    Every ceil(1/fraction)-th frame is held out; the phase within the period
    comes from the seed. Returns a new Scene sharing the frame objects.
    """
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in [0, 1)")
    n = len(scene.frames)
    split = [TRAIN] * n
    if holdout_fraction > 0:
        period = int(np.ceil(1.0 / holdout_fraction))
        if period < 2:
            raise ValueError("holdout_fraction would leave no training frames")
        offset = int(np.random.default_rng(seed).integers(period))
        for i in range(offset, n, period):
            split[i] = HOLDOUT
    if not any(s == TRAIN for s in split):
        raise ValueError("split left no training frames")
    return Scene(scene.frames, split)


# ---------------------------------------------------------------------------
# Run configuration

@dataclass
class RunConfig:
    """All numeric knobs of a training/rendering run."""

    k_closest: int = 8
    n_sample_points: int = 20000
    feature_dim: int = 128
    n_heads: int = 8
    pe_bands: int = 4
    d_inf_percentile: float = 99.0
    ray_batch: int = 8192
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    total_steps: int = 50000
    projection_resolution: int = 128
    seed: int = 0
    aggregation: str = "attention"   # attention | inverse_distance | naive_sum
    holdout_fraction: float = 0.1
    checkpoint_every: int = 1000

    def __post_init__(self):
        positive = [
            "n_sample_points", "feature_dim", "n_heads", "ray_batch",
            "lr_start", "lr_end", "total_steps", "projection_resolution",
            "checkpoint_every",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.k_closest < 0:
            raise ConfigError("k_closest must be >= 0")
        if self.pe_bands < 0:
            raise ConfigError("pe_bands must be >= 0")
        if not 0 < self.d_inf_percentile <= 100:
            raise ConfigError("d_inf_percentile must be in (0, 100]")
        if self.aggregation not in ("attention", "inverse_distance", "naive_sum"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.feature_dim % self.n_heads != 0:
            raise ConfigError("feature_dim must be divisible by n_heads")
        if self.projection_resolution % 4 != 0 or self.projection_resolution < 4:
            raise ConfigError("projection_resolution must be a multiple of 4")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in [0, 1)")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data, where=str(path))

    @classmethod
    def from_dict(cls, data: dict, where: str = "config") -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
