import numpy as np
import pytest

from awsdf.dataio import DEFAULT_INTRINSICS, aw_apartment, make_lookat_pose, render_depth
from awsdf.geom import Pose, unit
from awsdf.sampling import (
    NonSurfelSamples,
    SurfelSamples,
    assemble_batch,
    compute_bound,
    compute_grad_approx,
    nearest_surface_point,
    sample_nonsurfel,
    sample_surfel,
    sample_surfels,
)
from awsdf.surfel import Surfel


def brute_force_nn(x, P):
    """Independent oracle: per-point python loop over the surface set."""
    dist = np.empty(len(x))
    idx = np.empty(len(x), dtype=np.int64)
    for i, xi in enumerate(x):
        d = np.linalg.norm(xi - P, axis=1)
        idx[i] = np.argmin(d)
        dist[i] = d[idx[i]]
    return dist, idx


def flat_depth(value=2.0):
    K = DEFAULT_INTRINSICS
    depth = np.full((K.height, K.width), value)
    pose = Pose(np.eye(3), np.zeros(3))
    return depth, K, pose


def make_surfel(l1=2.0, l2=1.0):
    return Surfel(
        center=np.array([1.0, 2.0, 3.0]),
        normal=np.array([0.0, 0.0, 1.0]),
        axis1=np.array([1.0, 0.0, 0.0]),
        axis2=np.array([0.0, 1.0, 0.0]),
        len1=l1, len2=l2, direction_id=0, keyframe_id=0,
    )


class TestSampleNonSurfel:
    def test_stratification_thirds(self):
        # principal-point pixel: the unit-ray distance equals the z depth
        depth, K, pose = flat_depth(2.0)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            s = sample_nonsurfel(depth, K, pose, None, 1, rng,
                                 n_strat=3, n_surf=0, d_min=0.3, delta=0.1)
            strat = np.sort(s.d[:3])
            lo, hi = 0.3, s.D[0] + 0.1
            edges = lo + (hi - lo) * np.array([0, 1, 2, 3]) / 3
            for k in range(3):
                assert edges[k] <= strat[k] <= edges[k + 1]

    def test_ray_membership(self):
        depth, K, pose = flat_depth(2.0)
        pose = Pose(np.eye(3), np.array([0.3, -0.2, 0.1]))
        rng = np.random.default_rng(1)
        s = sample_nonsurfel(depth, K, pose, None, 50, rng)
        cam = pose.camera_center
        rel = s.points - cam
        # all samples of one ray share a direction with the surface point
        ns = len(s.d) // len(s.surface_points)
        surf_rel = np.repeat(s.surface_points - cam, ns, axis=0)
        cos = (rel * surf_rel).sum(1) / (
            np.linalg.norm(rel, axis=1) * np.linalg.norm(surf_rel, axis=1))
        assert np.all(np.abs(cos - 1.0) < 1e-9)

    def test_depth_range_and_surface_point(self):
        depth, K, pose = flat_depth(1.5)
        rng = np.random.default_rng(2)
        s = sample_nonsurfel(depth, K, pose, None, 30, rng,
                             n_strat=5, n_surf=4, d_min=0.07, delta=0.1)
        assert np.all(s.d >= 0.07 - 1e-12)
        assert np.all(s.d <= s.D + 0.1 + 1e-12)
        per_ray = 5 + 4 + 1
        d = s.d.reshape(-1, per_ray)
        D = s.D.reshape(-1, per_ray)
        assert np.array_equal(d[:, -1], D[:, -1])  # exact surface sample
        pts = s.points.reshape(-1, per_ray, 3)
        assert np.allclose(pts[:, -1], s.surface_points, atol=1e-12)

    def test_mask_all_true_empty(self):
        depth, K, pose = flat_depth()
        mask = np.ones_like(depth, dtype=bool)
        s = sample_nonsurfel(depth, K, pose, mask, 10, np.random.default_rng(0))
        assert len(s) == 0 and len(s.surface_points) == 0

    def test_masked_pixels_avoided(self):
        depth, K, pose = flat_depth()
        mask = np.zeros_like(depth, dtype=bool)
        mask[:, : K.width // 2] = True  # left half masked
        rng = np.random.default_rng(3)
        s = sample_nonsurfel(depth, K, pose, mask, 200, rng)
        # all world points have camera x >= 0 (right half of the image)
        assert np.all(s.surface_points[:, 0] > -1e-9)

    def test_invalid_depth_avoided(self):
        depth, K, pose = flat_depth()
        depth[50:, :] = 0.0
        rng = np.random.default_rng(4)
        s = sample_nonsurfel(depth, K, pose, None, 500, rng)
        # rows >= 50 are invalid; valid rows have camera y below a bound
        ymax = (49 + 0.5 - K.cy) / K.fy * 2.0
        assert np.all(s.surface_points[:, 1] <= ymax + 1e-6)

    def test_fewer_pixels_than_requested(self):
        depth, K, pose = flat_depth()
        mask = np.ones_like(depth, dtype=bool)
        mask[0, :3] = False
        s = sample_nonsurfel(depth, K, pose, mask, 100, np.random.default_rng(5),
                             n_strat=2, n_surf=1)
        assert len(s.surface_points) == 3
        assert len(s) == 3 * (2 + 1 + 1)


class TestSampleSurfel:
    def test_on_plane_and_in_bounds(self):
        s = make_surfel()
        pts = sample_surfel(s, 500, np.random.default_rng(0))
        rel = pts - s.center
        assert np.all(np.abs(rel @ s.normal) <= 1e-12)
        assert np.all(np.abs(rel @ s.axis1) <= s.len1 / 2)
        assert np.all(np.abs(rel @ s.axis2) <= s.len2 / 2)

    def test_tiny_rect_collapses(self):
        s = make_surfel(l1=1e-3, l2=1e-3)
        pts = sample_surfel(s, 100, np.random.default_rng(1))
        assert np.all(np.linalg.norm(pts - s.center, axis=1) <= 1e-3)

    def test_uniform_mean(self):
        s = make_surfel()
        pts = sample_surfel(s, 100_000, np.random.default_rng(2))
        rel = pts - s.center
        assert abs((rel @ s.axis1).mean()) <= 0.01 * s.len1
        assert abs((rel @ s.axis2).mean()) <= 0.01 * s.len2

    def test_round_robin_share(self):
        surfels = [make_surfel(), make_surfel(l1=0.5, l2=0.5)]
        out = sample_surfels(surfels, 100, 28, np.random.default_rng(3))
        assert len(out) == 100
        # first two draws alternate surfels before total is hit
        assert set(out.surfel_ids[:28]) == {0}
        assert set(out.surfel_ids[28:56]) == {1}


class TestBoundAndGrad:
    def test_worked_example_positive(self):
        x = np.zeros((1, 3))
        P = np.array([[0.7, 0, 0], [0, 0.4, 0], [0, 0, 0.9]])
        b, _, _ = compute_bound(x, np.array([1.5]), np.array([2.0]), P)
        assert b[0] == pytest.approx(0.4, abs=1e-15)

    def test_worked_example_negative(self):
        x = np.zeros((1, 3))
        P = np.array([[0.3, 0, 0], [0, 0, 1.4]])
        b, _, _ = compute_bound(x, np.array([2.3]), np.array([2.0]), P)
        assert b[0] == pytest.approx(-0.3, abs=1e-15)

    def test_grad_unit_offset(self):
        p = np.array([[1.0, 1.0, 1.0]])
        x = p + np.array([[0.0, 0.0, 0.5]])
        g, valid = compute_grad_approx(x, np.array([1.0]), np.array([2.0]), p)
        assert valid[0]
        assert np.allclose(g[0], [0, 0, 1], atol=1e-15)

    def test_grad_degenerate_invalid(self):
        p = np.array([[1.0, 1.0, 1.0]])
        g, valid = compute_grad_approx(p.copy(), np.array([1.0]),
                                       np.array([2.0]), p)
        assert not valid[0]
        assert np.all(g[0] == 0)

    def test_bitwise_match_against_brute_force(self):
        rng = np.random.default_rng(6)
        P = rng.normal(size=(1000, 3))
        x = rng.normal(size=(100, 3)) * 2.0
        dist, idx = nearest_surface_point(x, P)
        dist_o, idx_o = brute_force_nn(x, P)
        assert np.array_equal(idx, idx_o)
        assert np.array_equal(dist, dist_o)  # bit-for-bit

    def test_bound_le_depth_gap(self):
        scene = aw_apartment()
        K = DEFAULT_INTRINSICS
        pose = make_lookat_pose(np.array([0.0, 0.0, 1.3]), np.array([1.0, 0.2, -0.2]))
        depth = render_depth(scene, pose, K)
        rng = np.random.default_rng(7)
        s = sample_nonsurfel(depth, K, pose, None, 40, rng)
        batch = assemble_batch([s], SurfelSamples(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int)))
        nb = batch.bound[~batch.is_surfel]
        assert np.all(np.abs(nb) <= np.abs(s.D - s.d) + 1e-12)

    def test_empty_surface_set_raises(self):
        with pytest.raises(ValueError, match="empty"):
            compute_bound(np.zeros((1, 3)), np.array([1.0]), np.array([2.0]),
                          np.zeros((0, 3)))


class TestAssembleBatch:
    def batch(self, mask=None, seed=8):
        scene = aw_apartment()
        K = DEFAULT_INTRINSICS
        pose = make_lookat_pose(np.array([-0.5, -0.3, 1.3]), np.array([1.0, 0.4, -0.3]))
        depth = render_depth(scene, pose, K)
        rng = np.random.default_rng(seed)
        rays = sample_nonsurfel(depth, K, pose, mask, 12, rng)
        n_n = len(rays)
        n_s = round(n_n * 0.2 / 0.8)
        surf = sample_surfels([make_surfel()], n_s, 28, rng)
        return assemble_batch([rays], surf), depth

    def test_counts_and_classes(self):
        batch, _ = self.batch()
        assert batch.n_surfel + batch.n_nonsurfel == len(batch.points)
        assert batch.n_surfel == round(batch.n_nonsurfel * 0.25)
        assert np.all(batch.bound[batch.is_surfel] == 0.0)
        assert np.all(batch.grad_valid[batch.is_surfel])
        g = batch.grad_target[batch.is_surfel]
        assert np.allclose(g, [0, 0, 1])

    def test_surface_set_includes_surfel_points(self):
        batch, _ = self.batch()
        # P holds surface points plus every surfel sample
        assert len(batch.surface_points) == batch.n_surfel + 12

    def test_share_independent_of_mask(self):
        b0, depth = self.batch(mask=None)
        mask = np.zeros_like(depth, dtype=bool)
        mask[:, ::2] = True  # half the image masked
        b1, _ = self.batch(mask=mask)
        f0 = b0.n_surfel / len(b0.points)
        f1 = b1.n_surfel / len(b1.points)
        assert abs(f0 - f1) < 0.02

    def test_gradients_unit_or_invalid(self):
        batch, _ = self.batch()
        nrm = np.linalg.norm(batch.grad_target, axis=1)
        assert np.all(np.abs(nrm[batch.grad_valid] - 1.0) < 1e-12)
        assert np.all(nrm[~batch.grad_valid] == 0.0)

    def test_loss_batch_fields(self):
        batch, _ = self.batch()
        lb = batch.to_loss_batch()
        assert lb.points is batch.points
        assert lb.bound is batch.bound
