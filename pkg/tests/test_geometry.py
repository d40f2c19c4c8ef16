import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headforge.geometry import (Camera, DegenerateGeometryError, Pose, RegionMasks,
                                UndefinedDepthError, apply_pose, build_hair_mesh,
                                compute_hair_region, project, quat_multiply,
                                relative_pose, rigid_align, triangulate_region, unproject)


def random_pose(rng, trans_scale=100.0):
    q = rng.normal(size=4)
    return Pose(q, rng.normal(scale=trans_scale, size=3))


class TestApplyPose:
    def test_identity(self, rng):
        pts = rng.normal(size=(10, 3))
        out = apply_pose(pts, Pose.identity())
        np.testing.assert_allclose(out, pts, atol=1e-12)

    def test_quarter_turn_about_z(self):
        pose = Pose.from_axis_angle([0, 0, 1], np.pi / 2)
        out = apply_pose(np.array([[1.0, 0.0, 0.0]]), pose)
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-6)

    def test_compose_with_inverse_is_identity(self, rng):
        # oracle: a transform followed by its inverse restores the input
        pts = rng.normal(scale=50, size=(20, 3))
        for _ in range(10):
            pose = random_pose(rng)
            back = apply_pose(apply_pose(pts, pose), pose.inverse())
            np.testing.assert_allclose(back, pts, atol=1e-6)

    def test_distances_preserved(self, rng):
        pts = rng.normal(scale=80, size=(15, 3))
        pose = random_pose(rng)
        moved = apply_pose(pts, pose)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
        np.testing.assert_allclose(d0, d1, atol=1e-6)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_quaternion_composition_associative(self, seed):
        rng = np.random.default_rng(seed)
        qs = rng.normal(size=(3, 4))
        qs /= np.linalg.norm(qs, axis=1, keepdims=True)
        lhs = quat_multiply(quat_multiply(qs[0], qs[1]), qs[2])
        rhs = quat_multiply(qs[0], quat_multiply(qs[1], qs[2]))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestRelativePose:
    def test_same_pose_gives_identity(self, rng):
        for _ in range(5):
            pose = random_pose(rng)
            rel = relative_pose(pose, pose)
            np.testing.assert_allclose(np.abs(rel.quaternion[0]), 1.0, atol=1e-9)
            np.testing.assert_allclose(rel.translation, 0.0, atol=1e-6)

    def test_identity_first_pose_returns_second(self, rng):
        pose2 = random_pose(rng)
        rel = relative_pose(Pose.identity(), pose2)
        np.testing.assert_allclose(rel.rotation_matrix(), pose2.rotation_matrix(), atol=1e-12)
        np.testing.assert_allclose(rel.translation, pose2.translation, atol=1e-12)

    def test_chained_map_equality(self, rng):
        # oracle: matrix product route through a shared world point
        for _ in range(10):
            p1, p2 = random_pose(rng), random_pose(rng)
            x_world = rng.normal(scale=100, size=(7, 3))
            via_rel = apply_pose(apply_pose(x_world, p1), relative_pose(p1, p2))
            direct = apply_pose(x_world, p2)
            np.testing.assert_allclose(via_rel, direct, atol=1e-6)


class TestProjection:
    def test_optical_axis(self):
        cam = Camera(1000.0, [128.0, 128.0], 256, 256)
        uv, depth, valid = project(np.array([[0.0, 0.0, 1000.0]]), cam)
        np.testing.assert_allclose(uv, [[128.0, 128.0]])
        assert depth[0] == 1000.0 and valid[0]

    def test_similar_triangles(self):
        cam = Camera(1000.0, [128.0, 128.0], 256, 256)
        uv, _, _ = project(np.array([[100.0, 0.0, 1000.0]]), cam)
        np.testing.assert_allclose(uv, [[228.0, 128.0]])

    def test_behind_camera_flagged(self):
        cam = Camera.default(256)
        uv, _, valid = project(np.array([[0.0, 0.0, -5.0]]), cam)
        assert not valid[0]
        assert np.isnan(uv[0]).all()


class TestUnproject:
    def test_constant_depth(self):
        cam = Camera.default(32)
        depth = np.full((32, 32), 1000.0)
        pts, pixels = unproject(depth, np.ones((32, 32), bool), cam)
        np.testing.assert_allclose(pts[:, 2], 1000.0)
        assert len(pts) == 32 * 32

    def test_pixel_at_principal_point(self):
        # principal point placed exactly on a pixel center
        cam = Camera(500.0, [8.5, 8.5], 16, 16)
        mask = np.zeros((16, 16), bool)
        mask[8, 8] = True
        pts, _ = unproject(np.full((16, 16), 750.0), mask, cam)
        np.testing.assert_allclose(pts, [[0.0, 0.0, 750.0]], atol=1e-12)

    def test_project_unproject_round_trip(self, rng):
        # oracle: closed-form inverse recovers pixel centers and depths
        cam = Camera.default(48)
        depth = rng.uniform(500, 1500, size=(48, 48))
        mask = rng.random((48, 48)) > 0.3
        pts, pixels = unproject(depth, mask, cam)
        uv, z, valid = project(pts, cam)
        assert valid.all()
        np.testing.assert_allclose(uv, pixels + 0.5, atol=1e-5)
        np.testing.assert_allclose(z, depth[pixels[:, 1], pixels[:, 0]], atol=1e-5)

    def test_undefined_depth_in_mask_raises(self):
        cam = Camera.default(16)
        depth = np.full((16, 16), np.nan)
        depth[3, 3] = 900.0
        mask = np.zeros((16, 16), bool)
        mask[3, 3] = mask[3, 4] = True
        with pytest.raises(UndefinedDepthError, match="4"):
            unproject(depth, mask, cam)


class TestTriangulateRegion:
    def test_two_by_two(self):
        mask = np.zeros((4, 4), bool)
        mask[1:3, 1:3] = True
        mesh = triangulate_region(mask)
        assert len(mesh.vertices) == 4
        assert len(mesh.triangles) == 2

    def test_three_by_three_quad_count(self):
        # oracle: 2 * (w-1) * (h-1) triangles on a full rectangle
        mask = np.zeros((5, 5), bool)
        mask[1:4, 1:4] = True
        mesh = triangulate_region(mask)
        assert len(mesh.vertices) == 9
        assert len(mesh.triangles) == 2 * 2 * 2

    def test_single_pixel(self):
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        mesh = triangulate_region(mask)
        assert len(mesh.vertices) == 1
        assert len(mesh.triangles) == 0

    def test_vertices_are_pixel_centers(self):
        mask = np.zeros((3, 3), bool)
        mask[0, 2] = True
        mesh = triangulate_region(mask)
        np.testing.assert_allclose(mesh.vertices, [[2.5, 0.5]])

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            triangulate_region(np.zeros((4, 4), bool))

    def test_no_triangle_leaves_mask(self, rng):
        mask = rng.random((12, 12)) > 0.35
        if not mask.any():
            mask[5, 5] = True
        mesh = triangulate_region(mask)
        for tri in mesh.triangles:
            for vid in tri:
                px = mesh.pixels[vid]
                assert mask[px[1], px[0]]


class TestHairRegion:
    @staticmethod
    def _masks(s, s_f, s_h, f):
        return RegionMasks(S=s, S_f=s_f, S_h=s_h, F=f)

    def test_face_fully_covered(self, rng):
        s = rng.random((8, 8)) > 0.2
        s_f = s & (rng.random((8, 8)) > 0.5)
        f = np.ones((8, 8), bool)  # F covers everything
        h = compute_hair_region(self._masks(s, s_f, s_f & False, f))
        np.testing.assert_array_equal(h, s & ~s_f)

    def test_empty_intersection(self, rng):
        s = rng.random((8, 8)) > 0.2
        s_f = s & (rng.random((8, 8)) > 0.5)
        f = np.zeros((8, 8), bool)
        h = compute_hair_region(self._masks(s, s_f, s & False, f))
        np.testing.assert_array_equal(h, s)

    def test_matches_per_pixel_oracle(self, rng):
        # oracle: brute-force per-pixel boolean evaluation
        for _ in range(20):
            s = rng.random((10, 10)) > 0.3
            s_f = s & (rng.random((10, 10)) > 0.4)
            f = rng.random((10, 10)) > 0.4
            masks = self._masks(s, s_f, s & False, f)
            h = compute_hair_region(masks)
            for y in range(10):
                for x in range(10):
                    expected = s[y, x] and not (s_f[y, x] and f[y, x])
                    assert h[y, x] == expected
            masks.validate()


class TestBuildHairMesh:
    def test_flat_depth_plane(self):
        cam = Camera.default(32)
        mask = np.zeros((32, 32), bool)
        mask[8:24, 8:24] = True
        depth = np.full((32, 32), 1000.0)
        image = np.full((32, 32, 3), 0.5)
        mesh = build_hair_mesh(image, depth, mask, cam)
        # planar: all z equal, no dropped triangles -> full quad count
        np.testing.assert_allclose(mesh.vertices[:, 2], 1000.0)
        assert len(mesh.triangles) == 2 * 15 * 15

    def test_step_edge_dropped(self):
        cam = Camera.default(32)
        mask = np.zeros((32, 32), bool)
        mask[8:24, 8:24] = True
        depth = np.full((32, 32), 1000.0)
        depth[:, 16:] = 1000.0 * 1.3  # 10x the 3% threshold
        image = np.zeros((32, 32, 3))
        mesh = build_hair_mesh(image, depth, mask, cam)
        # no triangle spans pixel columns 15 and 16
        cols = mesh.vertices[:, 0] > 0  # camera x sign splits the step sides
        for tri in mesh.triangles:
            sides = cols[tri]
            assert sides.all() or not sides.any()

    def test_vertex_count_excludes_isolated(self):
        # oracle: triangulation keeps |region| vertices; compaction drops
        # exactly the pixels in no fully-covered quad
        cam = Camera.default(16)
        mask = np.zeros((16, 16), bool)
        mask[2:6, 2:6] = True
        mask[10, 10] = True  # isolated pixel
        depth = np.full((16, 16), 900.0)
        image = np.zeros((16, 16, 3))
        mesh = build_hair_mesh(image, depth, mask, cam)
        assert len(mesh.vertices) == mask.sum() - 1

    def test_colors_sampled_at_pixel_centers(self):
        cam = Camera.default(8)
        mask = np.zeros((8, 8), bool)
        mask[2:4, 2:4] = True
        depth = np.full((8, 8), 800.0)
        image = np.zeros((8, 8, 3))
        image[2, 2] = (0.1, 0.2, 0.3)
        mesh = build_hair_mesh(image, depth, mask, cam)
        assert any(np.allclose(c, (0.1, 0.2, 0.3)) for c in mesh.colors)

    def test_undefined_depth_raises(self):
        cam = Camera.default(8)
        mask = np.zeros((8, 8), bool)
        mask[2:4, 2:4] = True
        depth = np.full((8, 8), np.nan)
        with pytest.raises(UndefinedDepthError):
            build_hair_mesh(np.zeros((8, 8, 3)), depth, mask, cam)


class TestRigidAlign:
    def test_identity_when_equal(self, rng):
        pts = rng.normal(scale=50, size=(12, 3))
        pose, residual = rigid_align(pts, pts)
        assert residual < 1e-9
        np.testing.assert_allclose(pose.rotation_matrix(), np.eye(3), atol=1e-9)

    def test_recovers_known_transform(self, rng):
        pts = rng.normal(scale=50, size=(20, 3))
        truth = random_pose(rng, trans_scale=30)
        moved = apply_pose(pts, truth)
        pose, residual = rigid_align(pts, moved)
        assert residual < 1e-9
        np.testing.assert_allclose(pose.rotation_matrix(), truth.rotation_matrix(), atol=1e-8)
        np.testing.assert_allclose(pose.translation, truth.translation, atol=1e-7)

    def test_noisy_matches_iterative_oracle(self, rng):
        # oracle: SVD-free minimization over axis-angle + translation
        from scipy.optimize import minimize

        src = rng.normal(scale=40, size=(25, 3))
        truth = random_pose(rng, trans_scale=20)
        tgt = apply_pose(src, truth) + rng.normal(scale=2.0, size=src.shape)
        pose, residual = rigid_align(src, tgt)

        def axis_angle_cost(x):
            angle = np.linalg.norm(x[:3])
            p = Pose.from_axis_angle(x[:3] if angle > 1e-12 else [1, 0, 0],
                                     angle, x[3:])
            return (np.linalg.norm(apply_pose(src, p) - tgt, axis=1) ** 2).sum()

        best = None
        for trial in range(4):
            x0 = np.concatenate([rng.normal(scale=0.5, size=3),
                                 rng.normal(scale=10, size=3)])
            res = minimize(axis_angle_cost, x0, method="Nelder-Mead",
                           options={"maxiter": 8000, "xatol": 1e-12, "fatol": 1e-14})
            if best is None or res.fun < best.fun:
                best = res
        angle = np.linalg.norm(best.x[:3])
        p_best = Pose.from_axis_angle(best.x[:3] if angle > 1e-12 else [1, 0, 0],
                                      angle, best.x[3:])
        oracle_residual = float(np.linalg.norm(apply_pose(src, p_best) - tgt, axis=1).mean())
        assert residual <= oracle_residual + 1e-6

    def test_collinear_flagged(self):
        t = np.linspace(0, 1, 10)
        src = np.stack([t, 2 * t, -t], axis=1)
        with pytest.raises(DegenerateGeometryError):
            rigid_align(src, src + 1.0)

    def test_too_few_points_flagged(self):
        with pytest.raises(DegenerateGeometryError):
            rigid_align(np.zeros((2, 3)), np.zeros((2, 3)))
