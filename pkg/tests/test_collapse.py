import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import box_distance_brute, free_ball_scan
from volbracket import (CollapseError, CollapseParams, VoxelSet, build_collapse_map,
                        displacement_report, evaluate_collapse, find_free_ball)
from volbracket.collapse import (MAX_EPS, ClearingField, IntegerCube, _box_distance,
                                 clearing_flow_phi, cube_collapse_psi, face_map_c,
                                 radial_to_cube_f, sample_voxels, skeleton_distance)
from volbracket.mollify import smoothstep_a
from volbracket.testsets import random_voxel_set

RNG = np.random.default_rng(2024)


class TestParams:
    @pytest.mark.parametrize("kw", [{"eps": 0.0}, {"eps": 0.2}, {"flow_steps": 8},
                                    {"retry_shrink": 1.0}, {"lambda_cap": -1.0},
                                    {"max_retries": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            CollapseParams(**kw)

    def test_cube_center(self):
        c = IntegerCube((3, -2, 0))
        assert np.array_equal(c.center - c.corner, [0.5, 0.5, 0.5])


class TestFaceMap:
    def test_face_center_fixed(self):
        assert np.array_equal(face_map_c([0.5, 0.0]), [0.5, 0.0])

    def test_corner_fixed(self):
        assert np.array_equal(face_map_c([0.5, 0.5]), [0.5, 0.5])
        assert np.array_equal(face_map_c([-0.5, 0.5, -0.5]), [-0.5, 0.5, -0.5])

    def test_formula(self):
        out = face_map_c([0.5, -0.25], 30.0)
        assert out[0] == 0.5
        assert out[1] == pytest.approx(smoothstep_a(0.25, 30.0) - 0.5, abs=1e-15)

    def test_stays_on_face(self):
        pts = RNG.uniform(-0.5, 0.5, (2000, 3))
        axis = RNG.integers(0, 3, 2000)
        side = RNG.choice([-0.5, 0.5], 2000)
        pts[np.arange(2000), axis] = side
        out = face_map_c(pts)
        assert np.array_equal(out[np.arange(2000), axis], side)
        assert np.all(np.abs(out) <= 0.5)

    def test_off_boundary(self):
        with pytest.raises(ValueError):
            face_map_c([0.3, 0.1])


class TestRadial:
    def test_axis(self):
        assert np.allclose(radial_to_cube_f([1.0, 0.0, 0.0]), [0.5, 0, 0], atol=0)

    def test_diagonal(self):
        u = np.ones(3) / math.sqrt(3)
        assert np.allclose(radial_to_cube_f(u), [0.5] * 3, atol=1e-15)

    def test_lands_on_boundary(self):
        u = RNG.normal(size=(1000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        assert np.max(np.abs(np.max(np.abs(radial_to_cube_f(u)), axis=1) - 0.5)) <= 1e-12

    def test_non_unit(self):
        with pytest.raises(ValueError):
            radial_to_cube_f([0.5, 0.0])


def _boundary_distance(y):
    # max-norm distance of each point to the boundary of its own cube
    frac = y - np.floor(y)
    return np.min(np.minimum(frac, 1 - frac), axis=1)


class TestPsi:
    eps = 1 / 6

    def test_center_fixed(self):
        m = np.array([2.5, -0.5])
        assert np.array_equal(cube_collapse_psi(m, self.eps), m)

    def test_inner_ball_identity(self):
        x = np.array([0.6, 0.5])
        assert np.array_equal(cube_collapse_psi(x, self.eps), x)
        pts = 0.5 + RNG.normal(size=(500, 3))
        pts = 0.5 + (pts - 0.5) / np.linalg.norm(pts - 0.5, axis=1, keepdims=True) \
            * RNG.uniform(0, self.eps, (500, 1))
        assert np.array_equal(cube_collapse_psi(pts, self.eps), pts)

    def test_face_center_target(self):
        out = cube_collapse_psi(np.array([0.9, 0.5]), self.eps)
        assert np.allclose(out, [1.0, 0.5], atol=1e-15)

    @pytest.mark.parametrize("n", [2, 3])
    def test_cube_invariance(self, n):
        x = RNG.uniform(-3, 3, (10_000, n))
        y = cube_collapse_psi(x, self.eps)
        lo = np.floor(x)
        assert np.all(y >= lo - 1e-12) and np.all(y <= lo + 1 + 1e-12)

    @pytest.mark.parametrize("n", [2, 3])
    def test_lands_on_boundary(self, n):
        x = RNG.uniform(-2, 2, (30_000, n))
        far = np.linalg.norm(x - np.floor(x) - 0.5, axis=1) >= 2 * self.eps
        x = x[far][:10_000]
        assert len(x) == 10_000
        assert np.max(_boundary_distance(cube_collapse_psi(x, self.eps))) <= 1e-12

    def test_face_consistency(self):
        base = RNG.uniform(0, 1, (2000, 3))
        base[:, 0] = 1.0
        left = base.copy()
        left[:, 0] -= 1e-8
        right = base.copy()
        right[:, 0] += 1e-8
        gap = np.abs(cube_collapse_psi(left, self.eps) - cube_collapse_psi(right, self.eps))
        assert np.max(gap) <= 1e-6

    def test_eps_range(self):
        with pytest.raises(ValueError):
            cube_collapse_psi(np.zeros(2), 0.2)


class TestFreeBall:
    def test_box_distance_matches_brute(self):
        lo = RNG.uniform(0, 1, (3000, 2))
        hi = lo + 0.01
        pts = RNG.uniform(-0.1, 1.1, (40, 2))
        got = _box_distance(pts, lo, hi)
        assert np.allclose(got, [box_distance_brute(p, lo, hi) for p in pts], atol=1e-15)

    def test_corner_voxel(self):
        k = VoxelSet(2, 1 / 64, np.zeros(2), [[0, 0]])
        ball = find_free_ball(k, IntegerCube((0, 0)))
        lo, hi = k.boxes()
        oracle = free_ball_scan(lo, hi, [0, 0])
        assert ball.eps_c >= 0.1
        assert ball.clearance >= oracle * (1 - 1e-3)
        assert box_distance_brute(ball.p, lo, hi) >= ball.clearance - 1e-15

    def test_random_against_scan(self):
        k = random_voxel_set(5, 2, 0.3, 12, spread=1.5)
        k = VoxelSet(2, k.voxel_size, np.zeros(2), k.occupied)
        lo, hi = k.boxes()
        cube = IntegerCube((0, 0))
        ball = find_free_ball(k, cube)
        assert ball.clearance >= free_ball_scan(lo, hi, [0, 0], 61) * (1 - 1e-3)
        assert ball.eps_c == pytest.approx(ball.clearance / 3)

    def test_full_cube(self):
        k = VoxelSet(2, 1 / 8, np.zeros(2), np.argwhere(np.ones((8, 8), bool)))
        assert find_free_ball(k, IntegerCube((0, 0))) is None

    def test_empty_cube(self):
        k = VoxelSet(2, 1 / 8, np.zeros(2), [[20, 20]])
        ball = find_free_ball(k, IntegerCube((0, 0)))
        assert ball.eps_c == pytest.approx(1 / 6, abs=1e-3)


def _generic(seed=11, n=2, measure=0.05, count=20):
    k = random_voxel_set(seed, n, measure, count)
    return k, build_collapse_map(k)


class TestClearingFlow:
    def test_capsule_must_fit(self):
        with pytest.raises(CollapseError):
            ClearingField(IntegerCube((0, 0)), np.array([0.1, 0.5]), 0.1, 0.1)
        with pytest.raises(CollapseError):
            ClearingField(IntegerCube((0, 0)), np.array([0.5, 0.5]), 0.05, 0.1)

    def test_far_points_fixed(self):
        k, cmap = _generic()
        far = np.array([[1000.5, 3.25], [-400.0, 7.1]])
        assert np.array_equal(clearing_flow_phi(far, cmap.clearing, (), cmap.params), far)

    def test_ball_transport(self):
        k, cmap = _generic()
        for f in cmap.clearing:
            v = RNG.normal(size=(100, 2))
            v *= (RNG.uniform(0, 1.98 * cmap.eps, (100, 1))
                  / np.linalg.norm(v, axis=1, keepdims=True))
            out = clearing_flow_phi(f.p + v, cmap.clearing, (), cmap.params)
            assert np.max(np.abs(out - (f.cube.center + v))) <= 1e-9
            assert np.max(np.abs(clearing_flow_phi(f.p[None], cmap.clearing, (), cmap.params)
                                 - f.cube.center)) <= 1e-9

    def test_injectivity_proxy(self):
        k, cmap = _generic()
        f = cmap.clearing[0]
        x = f.cube.corner + RNG.uniform(0, 1, (1000, 2))
        y = f.cube.corner + RNG.uniform(0, 1, (1000, 2))
        fx = clearing_flow_phi(x, cmap.clearing, (), cmap.params)
        fy = clearing_flow_phi(y, cmap.clearing, (), cmap.params)
        ratio = np.linalg.norm(fx - fy, axis=1) / np.linalg.norm(x - y, axis=1)
        assert np.min(ratio) >= 1e-8

    def test_postcondition(self):
        k, cmap = _generic(seed=4, n=3, measure=0.2, count=30)
        y = clearing_flow_phi(sample_voxels(k, 16, 1) * cmap.gamma, cmap.clearing, (), cmap.params)
        dist = np.linalg.norm(y - np.floor(y) - 0.5, axis=1)
        assert np.all(dist >= 2 * cmap.eps * (1 - 1e-6))


class TestBuild:
    def test_empty_identity(self):
        k = VoxelSet(2, 0.1, np.zeros(2), np.zeros((0, 2)))
        cmap = build_collapse_map(k)
        assert cmap.mode == "identity"
        x = RNG.normal(size=(10, 2))
        assert np.array_equal(evaluate_collapse(cmap, x), x)
        rep = displacement_report(cmap, k)
        assert rep.max_displacement == 0 and rep.to_dict()["skeleton_max_distance"] == "not applicable"

    def test_gamma_single_voxel(self):
        k = VoxelSet(3, 0.5, np.zeros(3), [[0, 0, 0]])
        cmap = build_collapse_map(k)
        assert cmap.gamma == pytest.approx(2.0, rel=1e-15)
        assert cmap.mode == "special"

    def test_special_mode_certificate(self):
        k = VoxelSet(2, 0.5, np.array([3.0, -1.0]), [[0, 0]])
        cmap = build_collapse_map(k)
        assert cmap.mode == "special"
        rep = displacement_report(cmap, k, 16)
        assert rep.max_displacement <= rep.bound * (1 + 1e-6)
        assert rep.skeleton_max_distance <= 1e-9
        assert cmap.to_dict()["cubes"] == [{"nu": [6, -2], "special": True}]

    def test_gamma_generic(self):
        k, cmap = _generic(n=3, measure=0.02, count=25)
        assert cmap.mode == "generic"
        assert cmap.gamma ** 3 * k.measure == pytest.approx(1.0, abs=1e-12)

    def test_random_25_voxel_displacement(self):
        k = random_voxel_set(99, 2, 0.01, 25)
        cmap = build_collapse_map(k)
        rep = displacement_report(cmap, k, 32, seed=2)
        assert rep.max_displacement <= 0.1 * (1 + 1e-6)
        assert rep.skeleton_max_distance <= 1e-9

    def test_saturated_but_spread(self):
        idx = np.vstack([np.argwhere(np.ones((64, 64), bool)), [[200, 200]]])
        k = VoxelSet(2, 1 / 64, np.zeros(2), idx)
        with pytest.raises(CollapseError):
            build_collapse_map(k)

    def test_flow_step_limit(self):
        k = random_voxel_set(11, 2, 0.05, 20)
        with pytest.raises(CollapseError, match="flow steps"):
            build_collapse_map(k, CollapseParams(flow_steps=64, max_flow_steps=64))

    def test_deep_inside_free_cube_goes_to_boundary(self):
        k, cmap = _generic()
        g = cmap.gamma
        x = np.array([[100.2, 100.8]]) / g
        y = evaluate_collapse(cmap, x) * g
        assert _boundary_distance(y)[0] <= 1e-12

    def test_motion_confined_to_cube(self):
        k, cmap = _generic()
        x = RNG.uniform(-10, 10, (5000, 2))
        y = evaluate_collapse(cmap, x)
        assert np.all(np.abs((y - x) * cmap.gamma) <= 1 + 1e-12)

    def test_to_dict_schema(self):
        _, cmap = _generic()
        d = cmap.to_dict()
        assert set(d) == {"mode", "gamma", "eps", "cubes", "retries_used"}
        assert all(set(c) == {"nu", "p", "eps_c"} for c in d["cubes"])
        assert d["eps"] <= MAX_EPS

    def test_deterministic(self):
        k = random_voxel_set(8, 2, 0.1, 15)
        a = displacement_report(build_collapse_map(k), k, 16, seed=5).to_dict()
        b = displacement_report(build_collapse_map(k), k, 16, seed=5).to_dict()
        assert a == b


def test_skeleton_distance():
    y = np.array([[0.0, 0.3], [0.5, 0.5], [2.0, -1.0]])
    assert np.allclose(skeleton_distance(y), [0.0, 0.5, 0.0])


def test_sample_voxels_requires_density():
    k = VoxelSet(2, 0.1, np.zeros(2), [[0, 0]])
    with pytest.raises(ValueError):
        sample_voxels(k, 4)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.floats(0.001, 0.5),
       st.integers(3, 25))
def test_displacement_certificate_property(seed, n, measure, count):
    k = random_voxel_set(seed, n, measure, count)
    cmap = build_collapse_map(k)
    rep = displacement_report(cmap, k, 8, seed)
    assert rep.max_displacement <= rep.bound * (1 + 1e-6)
    assert rep.max_displacement ** n <= k.measure * (1 + 1e-3)
    if cmap.mode != "identity":
        assert rep.skeleton_max_distance <= 1e-9
