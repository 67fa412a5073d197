import numpy as np
import pytest

from nplf import scene_io, synth_scenes


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rigid(rng) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = random_rotation(rng)
    T[:3, 3] = rng.normal(scale=5.0, size=3)
    return T


def tiny_spec(**overrides) -> synth_scenes.SceneSpec:
    defaults = dict(
        layout="corridor", extent=20.0, n_frames=6, forward_step=1.0,
        width=48, height=36, focal=36.0, points_per_frame=600,
        noise_sigma=0.0, seed=3,
    )
    defaults.update(overrides)
    return synth_scenes.SceneSpec(**defaults)


def tiny_config(**overrides) -> scene_io.RunConfig:
    defaults = dict(
        k_closest=4, n_sample_points=500, feature_dim=32, n_heads=4,
        pe_bands=4, ray_batch=64, lr_start=5e-4, lr_end=5e-5,
        total_steps=100, projection_resolution=32, seed=0,
    )
    defaults.update(overrides)
    return scene_io.RunConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene") / "tiny"
    synth_scenes.generate_scene(tiny_spec(), str(out))
    return str(out)


@pytest.fixture(scope="session")
def tiny_scene(tiny_scene_dir):
    return scene_io.load_scene(tiny_scene_dir)
