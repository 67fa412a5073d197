import numpy as np
import pytest
import torch

from nplf import point_encoder
from nplf.point_encoder import (
    FACES,
    DegenerateCloudError,
    DepthViewEncoder,
    bilinear_sample,
    encode_views,
    gather_point_features,
    normalize_cloud,
    project_to_planes,
    sample_cloud,
)
from nplf.scene_io import PointCloud


def brute_force_rasterize(pts, R):
    """Per-pixel min-depth oracle, one point at a time."""
    images = np.full((6, R, R), np.inf)
    for f, (axis, sign) in enumerate(FACES):
        free = [a for a in range(3) if a != axis]
        for p in pts:
            u = int(np.clip(np.floor((p[free[0]] + 1) / 2 * R), 0, R - 1))
            v = int(np.clip(np.floor((p[free[1]] + 1) / 2 * R), 0, R - 1))
            d = 1.0 - sign * p[axis]
            images[f, v, u] = min(images[f, v, u], d)
    images[np.isinf(images)] = 0.0
    return images.astype(np.float32)


class TestNormalizeCloud:
    def test_already_canonical_is_identity(self):
        pts = np.array([[-1.0, -1, -1], [1, 1, 1], [0, 0, 0]])
        normalized, t = normalize_cloud(PointCloud(pts))
        assert np.allclose(normalized, pts)
        assert np.allclose(t.center, 0) and t.scale == 1.0

    def test_anisotropic_bbox(self):
        pts = np.array([[0.0, 0, 0], [10, 2, 4]])
        normalized, t = normalize_cloud(PointCloud(pts))
        assert t.scale == pytest.approx(5.0)
        assert np.allclose(t.center, [5, 1, 2])
        assert np.abs(normalized).max() <= 1.0 + 1e-12

    def test_degenerate_cloud_rejected(self):
        pts = np.tile([[1.0, 2.0, 3.0]], (5, 1))
        with pytest.raises(DegenerateCloudError):
            normalize_cloud(PointCloud(pts))

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(scale=7, size=(50, 3))
        normalized, t = normalize_cloud(PointCloud(pts))
        assert np.allclose(t.invert(normalized), pts, atol=1e-12)


class TestProjectToPlanes:
    def test_cube_center_hits_face_centers(self):
        proj = project_to_planes(np.zeros((1, 3)), 128)
        for f in range(6):
            img = proj.depth_images[f]
            assert img[64, 64] == pytest.approx(1.0)
            assert (img != 0).sum() == 1

    def test_min_depth_wins(self):
        # both points project to the center pixel of the +Z face
        pts = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
        proj = project_to_planes(pts, 64)
        plus_z = FACES.index((2, +1))
        assert proj.depth_images[plus_z][32, 32] == pytest.approx(0.5)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, size=(500, 3))
        proj = project_to_planes(pts, 32)
        assert np.array_equal(proj.depth_images, brute_force_rasterize(pts, 32))

    def test_resolution_floor(self):
        with pytest.raises(ValueError):
            project_to_planes(np.zeros((1, 3)), 2)

    def test_slightly_out_of_cube_clamps_with_warning(self):
        pts = np.array([[1.0 + 5e-7, 0.0, 0.0]])
        with pytest.warns(UserWarning):
            proj = project_to_planes(pts, 16)
        assert proj.pixel_coords.max() <= 16.0

    def test_far_out_of_cube_rejected(self):
        with pytest.raises(ValueError):
            project_to_planes(np.array([[1.5, 0.0, 0.0]]), 16)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, size=(200, 3))
        perm = rng.permutation(200)
        a = project_to_planes(pts, 16)
        b = project_to_planes(pts[perm], 16)
        assert np.array_equal(a.depth_images, b.depth_images)
        assert np.array_equal(a.pixel_coords[perm], b.pixel_coords)


class TestEncodeViews:
    def test_published_shape_contract(self):
        # feature maps at one quarter of a 128 projection: 6 x 128 x 32 x 32
        enc = DepthViewEncoder(feature_dim=128)
        proj = project_to_planes(np.zeros((1, 3)), 128)
        maps = encode_views(proj, enc)
        assert tuple(maps.shape) == (6, 128, 32, 32)

    def test_identical_inputs_identical_maps(self):
        enc = DepthViewEncoder(feature_dim=16)
        proj = project_to_planes(np.zeros((1, 3)), 32)
        proj.depth_images[:] = 0.0
        maps = encode_views(proj, enc)
        for f in range(1, 6):
            assert torch.equal(maps[0], maps[f])

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        enc = DepthViewEncoder(feature_dim=8).double()
        proj = project_to_planes(np.random.default_rng(3).uniform(-1, 1, (64, 3)), 16)
        probe = torch.randn(6, 8, 4, 4, dtype=torch.float64)

        def scalar():
            return (encode_views(proj, enc) * probe).sum()

        value = scalar()
        value.backward()
        rng = np.random.default_rng(4)
        params = list(enc.parameters())
        for _ in range(5):
            p = params[rng.integers(len(params))]
            flat = rng.integers(p.numel())
            grad = p.grad.reshape(-1)[flat].item()
            eps = 1e-6
            with torch.no_grad():
                p.reshape(-1)[flat] += eps
                hi = scalar().item()
                p.reshape(-1)[flat] -= 2 * eps
                lo = scalar().item()
                p.reshape(-1)[flat] += eps
            fd = (hi - lo) / (2 * eps)
            assert grad == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestGatherPointFeatures:
    def test_node_exact_lookup(self):
        # a point projecting exactly onto feature node (2, 3) in every view
        R, S = 32, 8
        maps = torch.randn(6, 5, S, S, dtype=torch.float64)
        proj = point_encoder.CubeProjection(
            depth_images=np.zeros((6, R, R), dtype=np.float32),
            pixel_coords=np.tile([2 * 4.0, 3 * 4.0], (1, 6, 1)),
            resolution=R,
        )
        out = gather_point_features(proj, maps)
        expected = torch.cat([maps[f, :, 3, 2] for f in range(6)])
        assert torch.allclose(out.features[0], expected, atol=1e-12)

    def test_gather_matches_manual_bilinear_oracle(self):
        R, S = 32, 8
        rng = np.random.default_rng(11)
        maps = torch.as_tensor(rng.normal(size=(6, 7, S, S)))
        coords = rng.uniform(0, R, size=(25, 6, 2))
        proj = point_encoder.CubeProjection(
            depth_images=np.zeros((6, R, R), dtype=np.float32),
            pixel_coords=coords,
            resolution=R,
        )
        out = gather_point_features(proj, maps)
        for f in range(6):
            manual = bilinear_sample(
                maps[f], torch.as_tensor(coords[:, f] / 4.0)
            )
            assert torch.allclose(out.features[:, f * 7:(f + 1) * 7], manual,
                                  atol=1e-12)

    def test_feature_width_contract(self):
        enc = DepthViewEncoder(feature_dim=128)
        rng = np.random.default_rng(5)
        proj = project_to_planes(rng.uniform(-1, 1, (20, 3)), 128)
        maps = encode_views(proj, enc)
        feats = gather_point_features(proj, maps)
        assert tuple(feats.features.shape) == (20, 6 * 128)

    def test_quarter_offset_matches_manual_four_tap(self):
        S = 6
        fmap = torch.randn(3, S, S, dtype=torch.float64)
        coords = torch.tensor([[2.25, 3.75]], dtype=torch.float64)
        out = bilinear_sample(fmap, coords)
        manual = (
            fmap[:, 3, 2] * 0.75 * 0.25
            + fmap[:, 3, 3] * 0.25 * 0.25
            + fmap[:, 4, 2] * 0.75 * 0.75
            + fmap[:, 4, 3] * 0.25 * 0.75
        )
        assert torch.allclose(out[0], manual, atol=1e-9)

    def test_feature_is_locally_lipschitz_in_point_position(self):
        enc = DepthViewEncoder(feature_dim=8)
        rng = np.random.default_rng(6)
        pts = rng.uniform(-0.9, 0.9, size=(40, 3))

        def feature_of(points):
            proj = project_to_planes(points, 32)
            maps = encode_views(proj, enc)
            return gather_point_features(proj, maps).features.detach()

        base = feature_of(pts)
        deltas = []
        for eps in (1e-4, 1e-5):
            moved = pts.copy()
            moved[7] += eps / np.sqrt(3)
            deltas.append(float((feature_of(moved)[7] - base[7]).norm()))
        assert deltas[1] <= 0.3 * deltas[0] + 1e-12   # shrinks ~linearly with eps

    def test_end_to_end_gradient_to_encoder(self):
        enc = DepthViewEncoder(feature_dim=4).double()
        rng = np.random.default_rng(7)
        proj = project_to_planes(rng.uniform(-1, 1, (30, 3)), 16)
        probe = torch.randn(30, 24, dtype=torch.float64)

        def scalar():
            maps = encode_views(proj, enc)
            return (gather_point_features(proj, maps).features * probe).sum()

        scalar().backward()
        params = list(enc.parameters())
        for _ in range(10):
            p = params[rng.integers(len(params))]
            flat = rng.integers(p.numel())
            grad = p.grad.reshape(-1)[flat].item()
            eps = 1e-6
            with torch.no_grad():
                p.reshape(-1)[flat] += eps
                hi = scalar().item()
                p.reshape(-1)[flat] -= 2 * eps
                lo = scalar().item()
                p.reshape(-1)[flat] += eps
            fd = (hi - lo) / (2 * eps)
            if fd == 0 and grad == 0:
                continue
            assert grad == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestSampleCloud:
    def test_subsamples_to_limit(self):
        cloud = PointCloud(np.random.default_rng(8).normal(size=(30000, 3)))
        out = sample_cloud(cloud, 20000, seed=0)
        assert len(out) == 20000

    def test_identity_when_small(self):
        cloud = PointCloud(np.random.default_rng(9).normal(size=(500, 3)))
        assert sample_cloud(cloud, 20000, seed=0) is cloud

    def test_deterministic(self):
        cloud = PointCloud(np.random.default_rng(10).normal(size=(1000, 3)))
        a = sample_cloud(cloud, 100, seed=4)
        b = sample_cloud(cloud, 100, seed=4)
        assert np.array_equal(a.points, b.points)

    def test_without_replacement(self):
        cloud = PointCloud(np.arange(300).reshape(100, 3).astype(float))
        out = sample_cloud(cloud, 60, seed=1)
        assert len(np.unique(out.points[:, 0])) == 60
