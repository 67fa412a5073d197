import numpy as np
import pytest
import torch

from nplf import geometry, training
from nplf.model import PointLightField

from conftest import tiny_config


def tiny_model(dtype=torch.float32, **config_overrides):
    cfg = tiny_config(**config_overrides)
    state = training.new_state(cfg, dtype=dtype)
    return state.model, cfg


def frame_rays(scene, frame_index, n_rays, seed=0):
    frame = scene.frames[frame_index]
    rng = np.random.default_rng(seed)
    cam = frame.camera
    pixels = np.stack(
        [rng.integers(0, cam.width, n_rays), rng.integers(0, cam.height, n_rays)],
        axis=1,
    )
    dirs = geometry.camera_ray_directions(cam, pixels)
    origins = np.tile(cam.center, (n_rays, 1))
    return (origins, dirs), frame


class TestFusedExplicitEquivalence:
    @pytest.mark.parametrize("aggregation", ["attention", "inverse_distance", "naive_sum"])
    def test_paths_agree(self, tiny_scene, aggregation):
        model, cfg = tiny_model(dtype=torch.float64)
        with torch.no_grad():
            model.attention.far_code.normal_()
        training.set_far_threshold(
            training.ModelState(model, None, 0, cfg), tiny_scene
        )
        rays, frame = frame_rays(tiny_scene, 1, 32)
        features = model.encode_cloud(frame.cloud)
        selection = model.select(rays, frame.cloud, frame.camera)
        explicit = model.ray_features_explicit(rays[1], selection, features, aggregation)
        fused = model.ray_features_fused(rays[1], selection, features, aggregation)
        assert torch.allclose(explicit, fused, atol=1e-10), aggregation

    def test_paths_agree_with_far_rays(self, tiny_scene):
        model, cfg = tiny_model(dtype=torch.float64)
        with torch.no_grad():
            model.attention.far_code.normal_()
            model.attention.far_threshold.fill_(1e-6)   # everything gated
        rays, frame = frame_rays(tiny_scene, 0, 16)
        features = model.encode_cloud(frame.cloud)
        selection = model.select(rays, frame.cloud, frame.camera)
        explicit = model.ray_features_explicit(rays[1], selection, features)
        fused = model.ray_features_fused(rays[1], selection, features)
        assert torch.allclose(explicit, fused, atol=1e-10)

    def test_k_zero_paths_agree(self, tiny_scene):
        model, cfg = tiny_model(dtype=torch.float64, k_closest=0)
        with torch.no_grad():
            model.attention.far_code.normal_()
        rays, frame = frame_rays(tiny_scene, 0, 8)
        features = model.encode_cloud(frame.cloud)
        selection = model.select(rays, frame.cloud, frame.camera)
        assert selection.k == 0
        explicit = model.ray_features_explicit(rays[1], selection, features)
        fused = model.ray_features_fused(rays[1], selection, features)
        assert torch.allclose(explicit, fused, atol=1e-10)


class TestSingleEvaluationProperty:
    def test_forward_rays_counts_batch(self, tiny_scene):
        model, _ = tiny_model()
        rays, frame = frame_rays(tiny_scene, 0, 23)
        features = model.encode_cloud(frame.cloud)
        model.head.reset_evaluations()
        model.forward_rays(rays, frame.cloud, frame.camera, features)
        assert model.head.evaluations == 23

    def test_render_image_is_one_eval_per_pixel(self, tiny_scene):
        model, _ = tiny_model()
        frame = tiny_scene.frames[0]
        model.head.reset_evaluations()
        image, gate = model.render_image(frame.camera, frame.cloud, chunk=500)
        H, W = frame.camera.height, frame.camera.width
        assert model.head.evaluations == H * W
        assert image.shape == (H, W, 3)
        assert gate.shape == (H, W)
        assert (image >= 0).all() and (image <= 1).all()

    def test_render_deterministic(self, tiny_scene):
        model, _ = tiny_model()
        frame = tiny_scene.frames[2]
        a, _ = model.render_image(frame.camera, frame.cloud)
        b, _ = model.render_image(frame.camera, frame.cloud)
        assert np.array_equal(a, b)

    def test_chunking_does_not_change_pixels(self, tiny_scene):
        model, _ = tiny_model()
        frame = tiny_scene.frames[0]
        a, _ = model.render_image(frame.camera, frame.cloud, chunk=64)
        b, _ = model.render_image(frame.camera, frame.cloud, chunk=4096)
        assert np.array_equal(a, b)


class TestBatchIndependence:
    def test_per_ray_results_independent_of_batch_composition(self, tiny_scene):
        model, _ = tiny_model(dtype=torch.float64)
        rays, frame = frame_rays(tiny_scene, 1, 12)
        features = model.encode_cloud(frame.cloud)
        full, _ = model.forward_rays(rays, frame.cloud, frame.camera, features)
        half, _ = model.forward_rays(
            (rays[0][:6], rays[1][:6]), frame.cloud, frame.camera, features
        )
        assert torch.allclose(full[:6], half, atol=1e-12)
