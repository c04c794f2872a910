"""Metrics, explicit-map fusion, meshing, and exporter tests."""

import numpy as np
import pytest

from awsdf import dataio, export_eval
from awsdf.atlanta import AtlantaFrame
from awsdf.export_eval import (EvalReport, Mesh, MeshResidualError, PlanarMap,
                               combine_explicit, evaluate, export_mesh,
                               export_planar_map, export_slice, load_mesh,
                               load_planar_map, marching_cubes,
                               point_rect_distance, sdf_slice)
from awsdf.surfel import Surfel, surfel_axes


def make_af():
    # v_v = +z, v_h1 = +x, second horizontal at 90 deg (+y)
    rot = np.eye(3)[:, [2, 0, 1]]
    return AtlantaFrame(rot, np.array([0.0, 90.0]), np.array([1000.0, 500.0]))


def make_surfel(af, center, normal, len1, len2, did, kid=0):
    s1, s2 = surfel_axes(np.asarray(normal, dtype=float), af)
    return Surfel(center=np.asarray(center, dtype=float),
                  normal=np.asarray(normal, dtype=float),
                  axis1=s1, axis2=s2, len1=len1, len2=len2,
                  direction_id=did, keyframe_id=kid)


def box_room_scene():
    """Empty box room: x in [-2,2], y in [-1.5,1.5], z in [0,2.5]."""
    room = dataio.BoxSpec(center=(0.0, 0.0, 1.25), half=(2.0, 1.5, 1.25))
    return dataio.SceneSpec(name="box_room", room=room, solids=[], rects=[])


def room_oracle(scene):
    return lambda X: dataio.scene_sdf(scene, X)


@pytest.fixture(scope="module")
def room_frames():
    scene = box_room_scene()
    seq = dataio.synth_sequence(scene, n_frames=8)
    return scene, [(d, p) for (_, d, p) in seq.frames()]


# --------------------------------------------------------- point_rect_distance


class TestPointRectDistance:
    def setup_method(self):
        self.af = make_af()
        self.s = make_surfel(self.af, (0, 0, 0), (0, 0, 1), 1.0, 1.0, 0)
        # axis1 = v_h1 = +x, axis2 = z cross x = +y for the vertical direction
        assert np.allclose(self.s.axis1, [1, 0, 0])
        assert np.allclose(self.s.axis2, [0, 1, 0])

    def test_above_center(self):
        d, cp = point_rect_distance(np.array([0.0, 0.0, 0.3]), self.s)
        assert d == pytest.approx(0.3, abs=1e-12)
        assert np.allclose(cp, [0, 0, 0])

    def test_edge_clamp(self):
        d, cp = point_rect_distance(np.array([1.0, 0.0, 0.0]), self.s)
        assert d == pytest.approx(0.5, abs=1e-12)
        assert np.allclose(cp, [0.5, 0, 0])

    def test_corner_pythagoras(self):
        d, _ = point_rect_distance(np.array([1.0, 0.0, 0.3]), self.s)
        assert d == pytest.approx(np.hypot(0.5, 0.3), abs=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 3))
        d, cp = point_rect_distance(X, self.s)
        for i in range(50):
            di, ci = point_rect_distance(X[i], self.s)
            assert d[i] == di
            assert np.array_equal(cp[i], ci)


# ------------------------------------------------------------ combine_explicit


class LinearModel:
    """f(x) = w.x + c with constant gradient; value/grad callable."""

    def __init__(self, w, c):
        self.w = np.asarray(w, dtype=float)
        self.c = float(c)

    def __call__(self, X):
        X = np.atleast_2d(X)
        return X @ self.w + self.c, np.broadcast_to(self.w, X.shape).copy()


class TestCombineExplicit:
    def setup_method(self):
        self.af = make_af()
        self.pmap = PlanarMap(self.af, [
            make_surfel(self.af, (0, 0, 0), (0, 0, 1), 4.0, 3.0, 0),
            make_surfel(self.af, (2, 0, 1.25), (-1, 0, 0), 2.5, 3.0, 1),
            make_surfel(self.af, (0, 1.5, 1.25), (0, -1, 0), 2.5, 4.0, 2),
        ])
        self.pmap.validate()

    def test_on_surfel_zero(self):
        model = LinearModel([0, 0, 0], 0.7)
        s, g = combine_explicit(np.array([0.3, 0.2, 0.0]), model, self.pmap)
        assert s == 0.0
        # on the rectangle the gradient falls back to the surfel normal
        assert np.allclose(g, [0, 0, 1])

    def test_implicit_branch_when_model_smaller(self):
        model = LinearModel([0, 0, 0], 0.01)
        x = np.array([0.0, 0.0, 1.0])  # 1 m above the floor surfel
        s, g = combine_explicit(x, model, self.pmap)
        assert s == 0.01
        assert np.allclose(g, [0, 0, 0])

    def test_sign_follows_normal_side(self):
        model = LinearModel([0, 0, 0], 5.0)
        s_above, g_above = combine_explicit(np.array([0.0, 0.0, 0.4]), model, self.pmap)
        s_below, g_below = combine_explicit(np.array([0.0, 0.0, -0.4]), model, self.pmap)
        assert s_above == pytest.approx(0.4, abs=1e-12)
        assert s_below == pytest.approx(-0.4, abs=1e-12)
        # gradient of a signed plane distance is +n on both sides
        assert np.allclose(g_above, [0, 0, 1])
        assert np.allclose(g_below, [0, 0, 1])

    def test_matches_bruteforce_over_surfels(self):
        rng = np.random.default_rng(11)
        X = rng.uniform([-3, -3, -1], [3, 3, 3], size=(1000, 3))
        model = LinearModel([0.3, -0.2, 0.5], 0.1)
        s, g = combine_explicit(X, model, self.pmap)
        f, G = model(X)
        for i in range(len(X)):
            best_d, best_cp, best_k = np.inf, None, -1
            for k, sf in enumerate(self.pmap.surfels):
                d, cp = point_rect_distance(X[i], sf)
                if d < best_d:
                    best_d, best_cp, best_k = d, cp, k
            sf = self.pmap.surfels[best_k]
            side = 1.0 if (X[i] - sf.center) @ sf.normal >= 0 else -1.0
            s_exp = side * best_d
            if abs(s_exp) < abs(f[i]):
                assert s[i] == s_exp
                assert np.allclose(g[i], side * (X[i] - best_cp) / best_d)
            else:
                assert s[i] == f[i]
                assert np.array_equal(g[i], G[i])

    def test_empty_map_rejected(self):
        with pytest.raises(ValueError):
            combine_explicit(np.zeros(3), LinearModel([0, 0, 0], 1.0), PlanarMap(self.af, []))


# ------------------------------------------------------------------- evaluate


class TestEvaluate:
    def test_oracle_self_comparison_is_zero(self, room_frames):
        scene, frames = room_frames
        oracle = room_oracle(scene)
        rep = evaluate(oracle, oracle, frames, dataio.DEFAULT_INTRINSICS,
                       n_points=2000, seed=5)
        assert rep.sdf_error == 0.0
        assert rep.collision_error == 0.0
        assert rep.gradient_cos_distance == 0.0
        assert rep.n_points == 2000
        assert rep.mode == "implicit"

    def test_constant_offset(self, room_frames):
        scene, frames = room_frames
        oracle = room_oracle(scene)

        def shifted(X):
            s, g = oracle(X)
            return s + 0.05, g

        rep = evaluate(shifted, oracle, frames, dataio.DEFAULT_INTRINSICS,
                       n_points=2000, seed=5)
        assert rep.sdf_error == pytest.approx(5.0, abs=1e-9)
        assert rep.gradient_cos_distance == pytest.approx(0.0, abs=1e-12)
        assert rep.collision_error > 0

    def test_seed_determinism(self, room_frames):
        scene, frames = room_frames
        oracle = room_oracle(scene)

        def noisy(X):
            s, g = oracle(X)
            return s + 0.02 * np.sin(37.0 * X[:, 0]), g

        a = evaluate(noisy, oracle, frames, dataio.DEFAULT_INTRINSICS, n_points=500, seed=9)
        b = evaluate(noisy, oracle, frames, dataio.DEFAULT_INTRINSICS, n_points=500, seed=9)
        c = evaluate(noisy, oracle, frames, dataio.DEFAULT_INTRINSICS, n_points=500, seed=10)
        assert a == b
        assert a != c

    def test_combined_with_exact_surfels_beats_offset_model(self, room_frames):
        scene, frames = room_frames
        oracle = room_oracle(scene)
        af = make_af()
        # exact inner faces of the box room as surfels
        pmap = PlanarMap(af, [
            make_surfel(af, (0, 0, 0), (0, 0, 1), 4.0, 3.0, 0),
            make_surfel(af, (0, 0, 2.5), (0, 0, -1), 4.0, 3.0, 0),
            make_surfel(af, (2, 0, 1.25), (-1, 0, 0), 2.5, 3.0, 1),
            make_surfel(af, (-2, 0, 1.25), (1, 0, 0), 2.5, 3.0, 1),
            make_surfel(af, (0, 1.5, 1.25), (0, -1, 0), 2.5, 4.0, 2),
            make_surfel(af, (0, -1.5, 1.25), (0, 1, 0), 2.5, 4.0, 2),
        ])
        pmap.validate()

        def shifted(X):
            s, g = oracle(X)
            return s + 0.05, g

        K = dataio.DEFAULT_INTRINSICS
        imp = evaluate(shifted, oracle, frames, K, n_points=2000, seed=3)
        comb = evaluate(shifted, oracle, frames, K, n_points=2000, seed=3,
                        mode="combined", planar_map=pmap)
        assert comb.mode == "combined"
        assert comb.sdf_error < imp.sdf_error
        assert comb.sdf_error <= imp.sdf_error + 0.5

    def test_errors(self, room_frames):
        scene, frames = room_frames
        oracle = room_oracle(scene)
        K = dataio.DEFAULT_INTRINSICS
        with pytest.raises(ValueError):
            evaluate(oracle, None, frames, K, n_points=10)
        with pytest.raises(ValueError):
            evaluate(oracle, oracle, frames, K, n_points=10, mode="combined")
        with pytest.raises(ValueError):
            evaluate(oracle, oracle, frames, K, n_points=10, mode="nope")
        with pytest.raises(ValueError):
            evaluate(oracle, oracle, frames, K, n_points=0)

    def test_report_validation_and_text(self, tmp_path):
        rep = EvalReport(1.5, 0.01, 0.1, 100, "implicit")
        rep.validate()
        text = rep.to_text()
        assert "sdf_error_cm 1.5" in text
        assert text.startswith("awsdf eval report v1")
        p = tmp_path / "report.txt"
        rep.write(str(p))
        assert p.read_text() == text
        with pytest.raises(ValueError):
            EvalReport(-1.0, 0.0, 0.0, 10, "implicit").validate()
        with pytest.raises(ValueError):
            EvalReport(np.nan, 0.0, 0.0, 10, "implicit").validate()
        with pytest.raises(ValueError):
            EvalReport(1.0, 0.0, 0.0, 10, "both").validate()


# -------------------------------------------------------------- marching cubes


def sphere_values(X):
    return np.linalg.norm(X, axis=1) - 1.0


class TestMarchingCubes:
    def test_sphere_radii(self):
        bounds = (np.full(3, -1.5), np.full(3, 1.5))
        mesh = marching_cubes(sphere_values, bounds, resolution=64)
        assert not mesh.is_empty
        cell = 3.0 / 63
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.all(np.abs(radii - 1.0) <= 2 * cell)
        assert mesh.faces.min() >= 0
        assert mesh.faces.max() < len(mesh.vertices)

    def test_constant_positive_empty(self):
        mesh = marching_cubes(lambda X: np.ones(len(X)),
                              (np.full(3, -1.0), np.full(3, 1.0)), resolution=16)
        assert mesh.is_empty

    def test_residual_bound_enforced(self):
        def aliased(X):
            return np.linalg.norm(X, axis=1) - 1.0 + 2.0 * np.sin(40.0 * X[:, 0])

        with pytest.raises(MeshResidualError):
            marching_cubes(aliased, (np.full(3, -1.5), np.full(3, 1.5)), resolution=16)

    def test_degenerate_bounds(self):
        with pytest.raises(ValueError):
            marching_cubes(sphere_values, (np.zeros(3), np.zeros(3)), resolution=8)
        with pytest.raises(ValueError):
            marching_cubes(sphere_values, (np.full(3, -1.0), np.full(3, 1.0)), resolution=1)


# --------------------------------------------------------------------- slices


class TestSlice:
    def test_values_match_direct_eval(self):
        model = LinearModel([1.0, 2.0, 0.5], -0.3)
        bounds = (np.array([-1.0, -2.0, 0.0]), np.array([1.0, 2.0, 2.0]))
        vals = sdf_slice(model, 1.0, bounds, resolution=(11, 21, 2))
        xs = np.linspace(-1, 1, 11)
        ys = np.linspace(-2, 2, 21)
        for i in (0, 5, 10):
            for j in (0, 7, 20):
                direct, _ = model(np.array([[xs[i], ys[j], 1.0]]))
                assert vals[i, j] == direct[0]

    def test_height_outside_bounds(self):
        model = LinearModel([1, 0, 0], 0.0)
        with pytest.raises(ValueError):
            sdf_slice(model, 5.0, (np.zeros(3), np.ones(3)))

    def test_room_footprint_contour(self):
        scene = box_room_scene()

        def model(X):
            return dataio.scene_sdf(scene, X)[0]

        bounds = (np.array([-3.0, -2.5, 0.0]), np.array([3.0, 2.5, 2.5]))
        vals = sdf_slice(model, 1.25, bounds, resolution=(121, 101, 2))
        xs = np.linspace(-3, 3, 121)
        cell = xs[1] - xs[0]
        row = vals[:, 50]  # y == 0
        crossings = xs[:-1][np.sign(row[:-1]) != np.sign(row[1:])]
        # inner wall plane at x = +2 must be bracketed by a zero crossing
        assert np.min(np.abs(crossings - 2.0)) <= cell + 1e-12

    def test_export_deterministic(self, tmp_path):
        model = LinearModel([1.0, -0.5, 0.2], 0.05)
        vals = sdf_slice(model, 0.5, (np.full(3, -1.0), np.full(3, 1.0)), 32)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        r1, r2 = tmp_path / "a.npy", tmp_path / "b.npy"
        export_slice(vals, str(p1), str(r1))
        export_slice(vals, str(p2), str(r2))
        assert p1.read_bytes() == p2.read_bytes()
        assert r1.read_bytes() == r2.read_bytes()
        assert np.array_equal(np.load(r1), vals)

    def test_colormap_sign_convention(self):
        vals = np.array([[-1.0, 0.0, 1.0]])
        rgb = export_eval.slice_to_rgb(vals)
        assert tuple(rgb[0, 0]) == (0, 0, 255)      # negative: blue
        assert tuple(rgb[0, 1]) == (255, 255, 255)  # zero: white
        assert tuple(rgb[0, 2]) == (255, 0, 0)      # positive: red


# ------------------------------------------------------------------ exporters


class TestPlanarMapIO:
    def test_round_trip(self, tmp_path):
        af = make_af()
        pmap = PlanarMap(af, [
            make_surfel(af, (0.123456789012345, -0.2, 0.0), (0, 0, 1), 1.7, 2.3, 0, kid=4),
            make_surfel(af, (2, 0.3, 1.0), (-1, 0, 0), 0.5, 0.9, 1, kid=9),
        ])
        path = tmp_path / "map.txt"
        export_planar_map(pmap, str(path))
        back = load_planar_map(str(path))
        assert np.array_equal(back.frame.rotation, af.rotation)
        assert np.array_equal(back.frame.angles, af.angles)
        assert np.array_equal(back.frame.supports, af.supports)
        assert len(back.surfels) == 2
        for a, b in zip(pmap.surfels, back.surfels):
            assert np.max(np.abs(a.center - b.center)) <= 1e-9
            assert np.max(np.abs(a.normal - b.normal)) <= 1e-9
            assert np.max(np.abs(a.axis1 - b.axis1)) <= 1e-9
            assert np.max(np.abs(a.axis2 - b.axis2)) <= 1e-9
            assert a.len1 == b.len1 and a.len2 == b.len2
            assert a.direction_id == b.direction_id
            assert a.keyframe_id == b.keyframe_id

    def test_empty_map(self, tmp_path):
        path = tmp_path / "empty.txt"
        export_planar_map(PlanarMap(make_af(), []), str(path))
        back = load_planar_map(str(path))
        assert back.surfels == []

    def test_size_stays_small(self, tmp_path):
        af = make_af()
        rng = np.random.default_rng(0)
        surfels = [make_surfel(af, rng.normal(size=3), (0, 0, 1),
                               0.5 + rng.random(), 0.5 + rng.random(), 0)
                   for _ in range(500)]
        path = tmp_path / "big.txt"
        export_planar_map(PlanarMap(af, surfels), str(path))
        assert path.stat().st_size < 1_000_000

    def test_rejects_bad_file(self, tmp_path):
        p = tmp_path / "junk.txt"
        p.write_text("not a map\n")
        with pytest.raises(ValueError):
            load_planar_map(str(p))

    def test_validate_rejects_unresolved_direction(self):
        af = make_af()
        s = make_surfel(af, (0, 0, 0), (0, 0, 1), 1, 1, 0)
        s.direction_id = 7
        with pytest.raises(ValueError):
            PlanarMap(af, [s]).validate()


class TestMeshIO:
    def make_mesh(self):
        return marching_cubes(sphere_values, (np.full(3, -1.5), np.full(3, 1.5)), 16)

    @pytest.mark.parametrize("ext", ["obj", "ply"])
    def test_round_trip(self, tmp_path, ext):
        mesh = self.make_mesh()
        path = tmp_path / f"m.{ext}"
        export_mesh(mesh, str(path))
        back = load_mesh(str(path))
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.faces, mesh.faces)

    def test_empty_mesh_round_trip(self, tmp_path):
        empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        for ext in ("obj", "ply"):
            path = tmp_path / f"e.{ext}"
            export_mesh(empty, str(path))
            back = load_mesh(str(path))
            assert back.is_empty

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(ValueError):
            export_mesh(self.make_mesh(), str(tmp_path / "m.stl"))
