import numpy as np
import pytest

from headforge.geometry import Camera, Pose, TriMesh3D, apply_pose
from headforge.model import FaceCoefficients, evaluate_shape
from headforge.render import (SH_AMBIENT, compute_vertex_normals, rasterize, render_face,
                              sample_bilinear, sh_basis, shade, warp_image)


class TestShBasis:
    def test_band0_constant(self, rng):
        n = rng.normal(size=(50, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        vals = sh_basis(n)
        np.testing.assert_allclose(vals[:, 0], 0.282095, atol=1e-6)

    def test_band1_at_z_axis(self):
        vals = sh_basis(np.array([0.0, 0.0, 1.0]))
        c1 = np.sqrt(3.0 / (4.0 * np.pi))
        # band-1 order is (y, z, x)
        np.testing.assert_allclose(vals[1:4], [0.0, c1, 0.0], atol=1e-12)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            sh_basis(np.array([0.0, 0.0, 2.0]))

    def test_monte_carlo_orthonormality(self):
        # oracle: sphere integral of basis products approximates identity
        rng = np.random.default_rng(0)
        n = rng.normal(size=(100_000, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        y = sh_basis(n)
        gram = (y.T @ y) * (4.0 * np.pi / len(n))
        np.testing.assert_allclose(gram, np.eye(9), atol=2e-2)


class TestShade:
    def test_unit_ambient_reproduces_albedo(self, rng):
        albedo = rng.random((20, 3))
        normals = rng.normal(size=(20, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        gamma = np.zeros(9)
        gamma[0] = SH_AMBIENT
        np.testing.assert_allclose(shade(albedo, normals, gamma), albedo, atol=1e-12)

    def test_zero_light_is_black(self, rng):
        albedo = rng.random((10, 3))
        normals = np.tile([0.0, 0.0, 1.0], (10, 1))
        np.testing.assert_array_equal(shade(albedo, normals, np.zeros(9)), 0.0)

    def test_gamma_gradient_matches_fd(self, rng):
        # oracle: finite differences of the (pre-clamp) shading
        albedo = rng.random((5, 3))
        normals = rng.normal(size=(5, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        gamma = rng.normal(size=9) * 0.2
        analytic = albedo[:, :, None] * sh_basis(normals)[:, None, :]  # (5, 3, 9)
        h = 1e-5
        for j in range(9):
            gp, gm = gamma.copy(), gamma.copy()
            gp[j] += h
            gm[j] -= h
            fd = (shade(albedo, normals, gp, clamp=False)
                  - shade(albedo, normals, gm, clamp=False)) / (2 * h)
            np.testing.assert_allclose(fd, analytic[:, :, j], atol=1e-4)

    def test_linear_in_gamma_and_albedo(self, rng):
        albedo = rng.random((8, 3))
        normals = rng.normal(size=(8, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        g1, g2 = rng.normal(size=(2, 9))
        lhs = shade(albedo, normals, g1 + g2, clamp=False)
        rhs = shade(albedo, normals, g1, clamp=False) + shade(albedo, normals, g2, clamp=False)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        np.testing.assert_allclose(shade(2 * albedo, normals, g1, clamp=False),
                                   2 * shade(albedo, normals, g1, clamp=False), atol=1e-12)


class TestVertexNormals:
    def test_flat_square(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
        tris = np.array([[0, 1, 2], [0, 2, 3]])
        normals = compute_vertex_normals(verts, tris)
        for n in normals:
            np.testing.assert_allclose(np.abs(n[2]), 1.0, atol=1e-12)
            np.testing.assert_allclose(n[:2], 0.0, atol=1e-12)

    def test_icosphere_normals_radial(self):
        # oracle: the analytic normal of a sphere is the radial direction
        from headforge.model import icosphere
        verts, faces = icosphere(3)
        normals = compute_vertex_normals(verts, faces)
        cosines = np.abs((normals * verts).sum(axis=1))
        angles = np.degrees(np.arccos(np.clip(cosines, -1, 1)))
        assert angles.max() < 2.0

    def test_degenerate_triangle_contributes_nothing(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [2, 2, 2]], dtype=float)
        tris = np.array([[0, 1, 2], [0, 2, 3], [4, 4, 4]])
        with_degenerate = compute_vertex_normals(verts, tris)
        without = compute_vertex_normals(verts, tris[:2])
        np.testing.assert_allclose(with_degenerate[:4], without[:4], atol=1e-12)

    def test_isolated_vertex_zero_normal(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [9, 9, 9]], dtype=float)
        tris = np.array([[0, 1, 2]])
        normals = compute_vertex_normals(verts, tris)
        np.testing.assert_array_equal(normals[3], 0.0)


def _two_triangle_mesh(z_front=500.0, z_back=800.0):
    # both triangles cover the principal point
    verts = np.array([
        [-100, -100, z_front], [100, -60, z_front], [0, 120, z_front],
        [-100, 100, z_back], [100, 60, z_back], [0, -120, z_back],
    ], dtype=float)
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    colors = np.zeros((6, 3))
    colors[:3] = (1.0, 0.0, 0.0)
    colors[3:] = (0.0, 1.0, 0.0)
    return TriMesh3D(vertices=verts, triangles=tris, colors=colors)


class TestRasterize:
    def test_zbuffer_front_wins(self):
        cam = Camera.default(64)
        out = rasterize(_two_triangle_mesh(), cam)
        cy, cx = 32, 32
        assert out.mask[cy, cx]
        assert out.tri_id[cy, cx] == 0
        np.testing.assert_allclose(out.color[cy, cx], (1.0, 0.0, 0.0))

    def test_constant_attribute_interpolates_constant(self):
        cam = Camera.default(64)
        mesh = _two_triangle_mesh()
        attrs = np.full((6, 1), 0.77)
        out = rasterize(mesh, cam, attributes=attrs)
        np.testing.assert_allclose(out.color[out.mask][:, 0], 0.77, atol=1e-6)

    def test_bary_weights_sum_to_one(self):
        cam = Camera.default(64)
        out = rasterize(_two_triangle_mesh(), cam)
        sums = out.bary[out.mask].sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-5)
        assert (out.tri_id[~out.mask] == -1).all()
        assert np.isinf(out.depth[~out.mask]).all()

    def test_depth_matches_ray_cast_oracle(self, rng):
        # oracle: Moller-Trumbore ray-triangle intersection at pixel centers
        cam = Camera.default(64)
        verts = rng.normal(scale=60, size=(12, 3))
        verts[:, 2] = rng.uniform(400, 900, size=12)
        tris = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]])
        mesh = TriMesh3D(vertices=verts, triangles=tris, colors=np.zeros((12, 3)))
        out = rasterize(mesh, cam)
        ys, xs = np.nonzero(out.mask)
        checked = 0
        for y, x in zip(ys, xs):
            ray = np.array([(x + 0.5 - cam.principal_point[0]) / cam.focal,
                            (y + 0.5 - cam.principal_point[1]) / cam.focal, 1.0])
            t_hit = _ray_cast(verts[tris[out.tri_id[y, x]]], ray)
            assert t_hit is not None
            np.testing.assert_allclose(out.depth[y, x], t_hit, atol=1e-4)
            checked += 1
        assert checked > 50

    def test_shared_edge_single_owner(self):
        # two triangles sharing the diagonal of an axis-aligned square
        cam = Camera(100.0, [8.0, 8.0], 16, 16)
        z = 100.0
        # square from -4..4 in camera mm -> pixels 4..12
        corners = np.array([[-4.0, -4.0, z], [4.0, -4.0, z], [4.0, 4.0, z], [-4.0, 4.0, z]])
        mesh = TriMesh3D(vertices=corners, triangles=np.array([[0, 2, 1], [0, 3, 2]]),
                         colors=np.zeros((4, 3)))
        out = rasterize(mesh, cam)
        # every covered pixel must be owned exactly once; coverage equals the
        # square's pixel footprint with half-open edges
        assert out.mask.sum() == 8 * 8

    def test_resolution_consistency_smoke(self, scene96):
        # coverage at 2x resolution, majority-downsampled, drifts on less
        # than 2% of boundary-adjacent pixels
        from headforge.model import evaluate_shape
        from headforge.render import compute_vertex_normals

        model = scene96.model
        shape = evaluate_shape(model, scene96.coeffs.alpha, scene96.coeffs.beta)
        pose = scene96.view1.pose
        verts = apply_pose(shape, pose)
        mesh = TriMesh3D(vertices=verts, triangles=model.triangles.astype(np.int64),
                         colors=np.zeros((model.n_vertices, 3)))
        cam1 = scene96.camera
        out1 = rasterize(mesh, cam1)
        cam2 = Camera(cam1.focal * 2, cam1.principal_point * 2,
                      cam1.width * 2, cam1.height * 2)
        out2 = rasterize(mesh, cam2)
        blocks = out2.mask.reshape(cam1.height, 2, cam1.width, 2).sum(axis=(1, 3))
        down = blocks >= 3  # strict majority of the 4 children
        from scipy.ndimage import binary_dilation, binary_erosion
        # boundary-adjacent band: pixels whose 3x3 neighborhood is mixed
        band = binary_dilation(out1.mask) & ~binary_erosion(out1.mask)
        differ = down != out1.mask
        assert not differ[~band].any()  # drift only at the boundary band
        assert differ.sum() < 0.02 * band.sum()


def _ray_cast(tri, ray):
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    p = np.cross(ray, e2)
    det = e1 @ p
    if abs(det) < 1e-12:
        return None
    inv = 1.0 / det
    t_vec = -tri[0]
    u = (t_vec @ p) * inv
    q = np.cross(t_vec, e1)
    v = (ray @ q) * inv
    if u < -1e-9 or v < -1e-9 or u + v > 1 + 1e-9:
        return None
    return (e2 @ q) * inv


class TestRenderFace:
    def test_mean_head_has_coverage(self, model):
        cam = Camera.default(128)
        pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1000.0]))
        gamma = np.zeros(9)
        gamma[0] = SH_AMBIENT
        image, mask, depth = render_face(model, FaceCoefficients.zeros(model),
                                         pose, gamma, cam)
        assert mask.sum() > 1000
        assert np.isfinite(depth[mask]).all()
        assert np.isnan(depth[~mask]).all()

    def test_translation_shifts_coverage_centroid(self, model):
        # oracle: pinhole displacement focal * dx / z
        cam = Camera.default(128)
        gamma = np.zeros(9)
        gamma[0] = SH_AMBIENT
        coeffs = FaceCoefficients.zeros(model)
        pose1 = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1000.0]))
        pose2 = Pose(np.array([1.0, 0, 0, 0]), np.array([10.0, 0.0, 1000.0]))
        _, m1, d1 = render_face(model, coeffs, pose1, gamma, cam)
        _, m2, _ = render_face(model, coeffs, pose2, gamma, cam)
        c1 = np.argwhere(m1).mean(axis=0)
        c2 = np.argwhere(m2).mean(axis=0)
        z_mean = np.nanmean(d1)
        expected = cam.focal * 10.0 / z_mean
        assert abs((c2 - c1)[1] - expected) < 0.5
        assert abs((c2 - c1)[0]) < 0.5

    def test_face_depth_matches_ray_cast(self, model, rng):
        # oracle: ray-triangle intersection depth of the posed mesh
        cam = Camera.default(96)
        gamma = np.zeros(9)
        gamma[0] = SH_AMBIENT
        coeffs = FaceCoefficients.zeros(model)
        pose = Pose.from_axis_angle([0, 1, 0], np.radians(8), [0, 0, 950.0])
        _, mask, depth = render_face(model, coeffs, pose, gamma, cam)
        out = rasterize(TriMesh3D(
            vertices=apply_pose(evaluate_shape(model, coeffs.alpha, coeffs.beta), pose),
            triangles=model.triangles.astype(np.int64)), cam)
        verts = apply_pose(evaluate_shape(model, coeffs.alpha, coeffs.beta), pose)
        ys, xs = np.nonzero(mask)
        pick = rng.choice(len(ys), size=100, replace=False)
        for y, x in zip(ys[pick], xs[pick]):
            ray = np.array([(x + 0.5 - cam.principal_point[0]) / cam.focal,
                            (y + 0.5 - cam.principal_point[1]) / cam.focal, 1.0])
            tri = verts[model.triangles[out.tri_id[y, x]].astype(int)]
            t_hit = _ray_cast(tri, ray)
            assert t_hit is not None
            assert abs(depth[y, x] - t_hit) < 1e-3


class TestWarpImage:
    def test_identity_warp_preserves_colors(self, scene96):
        v = scene96.view1
        pose = v.pose
        warped, cov, _ = warp_image(v.image, v.depth_gt, v.masks.S, pose, pose,
                                    scene96.camera)
        diff = np.abs(warped - v.image)[cov]
        assert diff.max() < 1e-6

    def test_z_translation_shrinks_coverage(self, scene96):
        # oracle: projective scaling (1/1.1)^2 under +10% depth translation
        v = scene96.view1
        pose1 = v.pose
        z_mean = np.nanmean(v.depth_gt)
        pose2 = Pose(pose1.quaternion, pose1.translation + [0, 0, 0.1 * z_mean])
        _, cov1, _ = warp_image(v.image, v.depth_gt, v.masks.S, pose1, pose1,
                                scene96.camera)
        _, cov2, _ = warp_image(v.image, v.depth_gt, v.masks.S, pose1, pose2,
                                scene96.camera)
        ratio = cov2.sum() / cov1.sum()
        expected = (1 / 1.1) ** 2
        assert abs(ratio - expected) / expected < 0.05

    def test_round_trip_color_error_small(self, scene96):
        # oracle: forward warp then backward warp reproduces the source
        v = scene96.view1
        cam = scene96.camera
        pose_a = v.pose
        pose_b = Pose(
            np.array([np.cos(np.radians(4)), 0.0, np.sin(np.radians(4)), 0.0]),
            pose_a.translation).compose(Pose(pose_a.quaternion, np.zeros(3)))
        fwd_img, fwd_cov, fwd_out = warp_image(v.image, v.depth_gt, v.masks.S,
                                               pose_a, pose_b, cam)
        back_img, back_cov, _ = warp_image(fwd_img, fwd_out.depth_map(), fwd_cov,
                                           pose_b, pose_a, cam)
        mutual = back_cov & v.masks.S
        mae = np.abs(back_img - v.image)[mutual].mean()
        assert mae < 2.0 / 255.0

    def test_empty_region_rejected(self, scene96):
        v = scene96.view1
        with pytest.raises(ValueError):
            warp_image(v.image, v.depth_gt, np.zeros_like(v.masks.S), v.pose,
                       v.pose, scene96.camera)

    def test_identity_warp_idempotent_coverage(self, scene96):
        v = scene96.view1
        _, cov1, out1 = warp_image(v.image, v.depth_gt, v.masks.S, v.pose, v.pose,
                                   scene96.camera)
        img2, cov2, _ = warp_image(out1.color, out1.depth_map(), cov1, v.pose,
                                   v.pose, scene96.camera)
        assert np.array_equal(cov1, cov2)


class TestSampleBilinear:
    def test_integer_coordinates_exact(self, rng):
        img = rng.random((8, 10, 3))
        xy = np.array([[3.0, 5.0], [0.0, 0.0], [9.0, 7.0]])
        vals, _, valid = sample_bilinear(img, xy)
        assert valid.all()
        np.testing.assert_allclose(vals[0], img[5, 3], atol=1e-12)
        np.testing.assert_allclose(vals[1], img[0, 0], atol=1e-12)
        np.testing.assert_allclose(vals[2], img[7, 9], atol=1e-12)

    def test_midpoint_averages(self, rng):
        img = rng.random((4, 4))
        vals, _, _ = sample_bilinear(img, np.array([[1.5, 2.0]]))
        np.testing.assert_allclose(vals[0], 0.5 * (img[2, 1] + img[2, 2]), atol=1e-12)

    def test_gradient_matches_fd(self, rng):
        # oracle: central differences away from texel boundaries
        img = rng.random((16, 16, 3))
        pts = rng.uniform(2.1, 13.7, size=(40, 2))
        pts = pts[(np.abs(pts - np.round(pts)) > 0.05).all(axis=1)]
        _, grad, _ = sample_bilinear(img, pts)
        h = 1e-5
        for axis in range(2):
            dp = pts.copy()
            dm = pts.copy()
            dp[:, axis] += h
            dm[:, axis] -= h
            fd = (sample_bilinear(img, dp)[0] - sample_bilinear(img, dm)[0]) / (2 * h)
            np.testing.assert_allclose(grad[:, axis], fd, atol=1e-4)

    def test_out_of_bounds_flagged(self):
        img = np.ones((4, 4))
        vals, _, valid = sample_bilinear(img, np.array([[-0.5, 1.0], [1.0, 3.5]]))
        assert not valid[0] and not valid[1]
        assert vals[0] == 0.0
