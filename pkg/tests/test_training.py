import dataclasses
import json
import os

import numpy as np
import pytest
import torch

from nplf import scene_io, training
from nplf.scene_io import CameraView, Frame, PointCloud, RunConfig, Scene
from nplf.training import (
    CheckpointError,
    NonFiniteLossError,
    Trainer,
    evaluate,
    learning_rate,
    load_checkpoint,
    new_state,
    psnr,
    run_ablation,
    save_checkpoint,
    ssim,
    step_seed,
    train_step,
)

from conftest import tiny_config


def four_pixel_scene(seed=0):
    rng = np.random.default_rng(seed)
    K = np.array([[1.0, 0, 1.0], [0, 1.0, 1.0], [0, 0, 1.0]])
    cam = CameraView(K, np.eye(4), 2, 2, frame_index=0)
    pts = rng.uniform([-3, -3, 2.0], [3, 3, 6.0], size=(200, 3))
    cloud = PointCloud(pts, frame_index=0)
    image = np.array([[[0.9, 0.1, 0.1], [0.1, 0.9, 0.1]],
                      [[0.1, 0.1, 0.9], [0.8, 0.8, 0.2]]])
    return Scene([Frame(cam, image, cloud)])


def micro_config(**overrides):
    defaults = dict(
        k_closest=4, n_sample_points=200, feature_dim=8, n_heads=2,
        pe_bands=4, ray_batch=16, lr_start=2e-3, lr_end=2e-4,
        total_steps=500, projection_resolution=16, seed=0,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


class TestMetrics:
    def test_identical_images_cap(self):
        img = np.random.default_rng(0).uniform(size=(20, 30, 3))
        assert psnr(img, img) == 99.0
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_uniform_gray_closed_form(self):
        a = np.full((16, 16, 3), 0.5)
        b = np.full((16, 16, 3), 0.4)
        # mse = 0.01 -> 10 * log10(1 / 0.01) = 20 dB
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_ssim_decreases_monotonically_with_noise(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0.2, 0.8, size=(40, 50, 3))
        scores = []
        for sigma in [0.01, 0.03, 0.06, 0.12, 0.25]:
            noisy = np.clip(base + rng.normal(0, sigma, base.shape), 0, 1)
            scores.append(ssim(base, noisy))
        assert all(a > b for a, b in zip(scores, scores[1:])), scores

    def test_ssim_range(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(24, 24, 3))
        b = rng.uniform(size=(24, 24, 3))
        assert -1.0 <= ssim(a, b) <= 1.0


class TestLearningRate:
    def test_linear_schedule_exact(self):
        cfg = micro_config(lr_start=5e-4, lr_end=5e-5, total_steps=1000)
        assert learning_rate(cfg, 0) == 5e-4
        assert learning_rate(cfg, 1000) == 5e-5
        assert learning_rate(cfg, 500) == pytest.approx((5e-4 + 5e-5) / 2, abs=1e-20)
        assert learning_rate(cfg, 2000) == 5e-5   # clamped past the end


class TestTrainStep:
    def test_uses_the_configured_ray_budget(self):
        scene = four_pixel_scene()
        state = new_state(micro_config(ray_batch=24))
        training.set_far_threshold(state, scene)
        state.model.head.reset_evaluations()
        train_step(state, scene, step_seed(0, 0))
        assert state.model.head.evaluations == 24

    def test_deterministic_loss_sequence(self):
        scene = four_pixel_scene()
        runs = []
        for _ in range(2):
            state = new_state(micro_config())
            trainer = Trainer(state, scene)
            runs.append(trainer.run(10))
        assert runs[0] == runs[1]   # bitwise identical floats

    def test_loss_decreases_on_fixed_micro_batch_most_seeds(self, tiny_scene):
        # reusing one step seed pins the whole micro-batch; default learning
        # rate (the hot overfit rate overshoots on a 16-ray batch)
        wins = 0
        for seed in range(10):
            state = new_state(micro_config(seed=seed, ray_batch=16,
                                           lr_start=5e-4, lr_end=5e-5))
            training.set_far_threshold(state, tiny_scene)
            batch = step_seed(seed, 0)
            losses = [train_step(state, tiny_scene, batch) for _ in range(20)]
            wins += losses[-1] < losses[0]
        assert wins >= 9, f"only {wins}/10 seeds improved"

    def test_overfits_four_pixels(self):
        scene = four_pixel_scene()
        state = new_state(micro_config(feature_dim=16, n_heads=4, ray_batch=32))
        trainer = Trainer(state, scene)
        losses = trainer.run(500)
        assert losses[-1] < 1e-3, losses[-1]

    def test_non_finite_loss_aborts_with_dump(self):
        scene = four_pixel_scene()
        state = new_state(micro_config())
        training.set_far_threshold(state, scene)
        with torch.no_grad():
            state.model.head.layers[0].weight[0, 0] = float("nan")
        with pytest.raises(NonFiniteLossError) as err:
            train_step(state, scene, step_seed(0, 0))
        assert err.value.details["step"] == 0
        assert err.value.details["batch"]

    def test_holdout_pixels_never_reach_gradients(self, tiny_scene):
        split = scene_io.split_frames(tiny_scene, 0.34, seed=1)
        assert split.holdout_indices()

        def run(scene):
            state = new_state(micro_config())
            return Trainer(state, scene).run(6)

        poisoned_frames = []
        rng = np.random.default_rng(3)
        for i, frame in enumerate(split.frames):
            if split.split[i] == scene_io.HOLDOUT:
                bad = Frame(frame.camera, rng.uniform(size=frame.image.shape),
                            frame.cloud)
                poisoned_frames.append(bad)
            else:
                poisoned_frames.append(frame)
        poisoned = Scene(poisoned_frames, split.split)
        assert run(split) == run(poisoned)


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, tmp_path):
        scene = four_pixel_scene()
        state = new_state(micro_config())
        Trainer(state, scene).run(3)
        a, b = tmp_path / "a.nplf", tmp_path / "b.nplf"
        save_checkpoint(state, a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_round_trip_restores_everything(self, tmp_path):
        scene = four_pixel_scene()
        state = new_state(micro_config())
        Trainer(state, scene).run(2)
        path = tmp_path / "ckpt.nplf"
        save_checkpoint(state, path)
        again = load_checkpoint(path)
        assert again.step == state.step
        assert again.config == state.config
        for (n1, p1), (n2, p2) in zip(state.model.named_parameters(),
                                      again.model.named_parameters()):
            assert n1 == n2
            assert torch.equal(p1, p2), n1
        assert torch.equal(state.model.attention.far_threshold,
                           again.model.attention.far_threshold)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        scene = four_pixel_scene()
        state = new_state(micro_config())
        trainer = Trainer(state, scene)
        trainer.run(5)
        path = tmp_path / "mid.nplf"
        save_checkpoint(state, path)
        continued = trainer.run(5)

        resumed_state = load_checkpoint(path)
        resumed = Trainer(resumed_state, scene).run(5)
        assert resumed == continued   # bitwise equal loss sequences

    def test_version_mismatch_rejected(self, tmp_path):
        scene = four_pixel_scene()
        state = new_state(micro_config())
        training.set_far_threshold(state, scene)
        path = tmp_path / "ckpt.nplf"
        save_checkpoint(state, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99   # bump the version field
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        scene = four_pixel_scene()
        state = new_state(micro_config())
        training.set_far_threshold(state, scene)
        path = tmp_path / "ckpt.nplf"
        save_checkpoint(state, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 257])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.nplf"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestEvaluate:
    def test_reports_per_frame_and_mean(self, tiny_scene):
        split = scene_io.split_frames(tiny_scene, 0.34, seed=1)
        state = new_state(micro_config())
        report = evaluate(state, split, task="interpolation")
        assert report.task == "interpolation"
        assert len(report.frames) == len(split.holdout_indices())
        for entry in report.frames:
            assert 0 <= entry["psnr"] <= 99
            assert -1 <= entry["ssim"] <= 1
        assert report.mean_psnr == pytest.approx(
            np.mean([f["psnr"] for f in report.frames])
        )

    def test_evaluates_every_pixel_once(self, tiny_scene):
        state = new_state(micro_config())
        state.model.head.reset_evaluations()
        evaluate(state, tiny_scene, frames=[0], task="reconstruction")
        cam = tiny_scene.frames[0].camera
        assert state.model.head.evaluations == cam.width * cam.height


class TestAblation:
    def test_emits_all_variants_and_resumes(self, tiny_scene, tmp_path):
        out = tmp_path / "ablation.json"
        cfg = micro_config(ray_batch=16)
        rows = run_ablation(tiny_scene, cfg, budget=2, out_path=out)
        assert [r["variant"] for r in rows] == \
            ["naive_sum", "heuristic", "k0", "k1", "k2", "k8"]
        assert all("psnr" in r and "ssim" in r for r in rows)
        # resume: nothing left to do, rows come back unchanged
        again = run_ablation(tiny_scene, cfg, budget=2, out_path=out)
        assert again == rows

    def test_deterministic_per_seed(self, tiny_scene):
        cfg = micro_config(ray_batch=16)
        variants = (("k1", "attention", 1),)
        a = run_ablation(tiny_scene, cfg, budget=2, variants=variants)
        b = run_ablation(tiny_scene, cfg, budget=2, variants=variants)
        assert a == b
