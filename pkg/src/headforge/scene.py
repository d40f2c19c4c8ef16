"""Synthetic scene oracle: renders a generated head plus a procedurally
textured hair shell from two poses and emits ground truth for every quantity
the fitting pipeline estimates.

Everything is deterministic from the seed, so scenes double as regression
fixtures: recovery tests fit against the rendered images and compare with
the stored truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Camera, Pose, RegionMasks, apply_pose, compute_hair_region,
                       quat_to_matrix)
from .losses import LandmarkSet
from .model import FaceCoefficients, MorphableModel, evaluate_shape, evaluate_texture, synthesize_model
from .render import SH_AMBIENT, TriMesh3D, compute_vertex_normals, project, rasterize, shade, _safe_unit


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 128
    n_subdiv: int = 3
    k_id: int = 16
    k_exp: int = 8
    k_tex: int = 16
    coeff_std: float = 18.0
    hair_offset_mm: float = 14.0
    hair_texture_freq: float = 0.35   # cycles/mm of the procedural hair pattern
    head_distance_mm: float = 1000.0
    yaw2_deg: float = 10.0            # relative rotation between the two views
    noise: float = 0.0

    def __post_init__(self):
        if not 1.0 <= abs(self.yaw2_deg) <= 30.0:
            raise ValueError("views must differ by 1 to 30 degrees")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class SceneView:
    image: np.ndarray
    masks: RegionMasks
    depth_gt: np.ndarray       # visible-surface depth over S (NaN outside)
    face_depth_gt: np.ndarray  # face-only depth over F (NaN outside)
    pose: Pose
    landmarks: LandmarkSet


@dataclass
class SceneBundle:
    spec: SceneSpec
    model: MorphableModel
    coeffs: FaceCoefficients
    gamma: np.ndarray
    camera: Camera
    views: list[SceneView]
    hair_mesh_model: TriMesh3D  # hair shell in model space
    background: np.ndarray

    @property
    def view1(self) -> SceneView:
        return self.views[0]

    @property
    def view2(self) -> SceneView:
        return self.views[1]


def _background_plate(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth deterministic backdrop with mild structure (so warps have
    content to preserve) but nothing resembling the head texture."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = 0.18 + 0.14 * y
    ripple = 0.02 * np.sin(2 * np.pi * (1.5 * x + 0.7 * y) + rng.uniform(0, 2 * np.pi))
    plate = np.stack([base + ripple, base + 0.02 + ripple, base + 0.05 + ripple], axis=2)
    return np.clip(plate, 0.0, 1.0)


def _hair_shell(model: MorphableModel, shape_verts: np.ndarray, offset_mm: float,
                texture_freq: float, rng: np.random.Generator) -> TriMesh3D:
    """Offset shell over the top/back of the head, following the morphed
    shape, with a smooth procedural color pattern."""
    mean = model.mean_shape.astype(np.float64).reshape(-1, 3)
    unit = mean / np.linalg.norm(mean, axis=1, keepdims=True)
    selected = (unit[:, 1] < -0.05) | (unit[:, 2] > 0.35)

    keep_face = selected[model.triangles].all(axis=1)
    faces = model.triangles[keep_face].astype(np.int64)
    used = np.unique(faces)
    remap = -np.ones(model.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))

    verts = shape_verts[used] + unit[used] * offset_mm
    base = np.array([0.30, 0.20, 0.13])
    colors = np.tile(base, (len(used), 1))
    # two octaves of directional waves keep photometric gradients strong at
    # both coarse and fine alignment scales
    for octave in (1.0, 2.7):
        for _ in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.11) / octave
            wave = np.sin(2 * np.pi * octave * texture_freq
                          * (verts @ direction) / 10.0 + phase)
            colors += amp * wave[:, None] * rng.uniform(0.5, 1.0, size=3)
    colors = np.clip(colors, 0.02, 0.95)
    mesh = TriMesh3D(vertices=verts, triangles=remap[faces], colors=colors)
    mesh.validate()
    return mesh


def _view_pose(base: Pose, yaw_deg: float, pivot: np.ndarray) -> Pose:
    """Rotate the posed head about a camera-frame pivot by yaw (camera Y axis)."""
    delta = Pose.from_axis_angle([0.0, 1.0, 0.0], np.radians(yaw_deg))
    rot = delta.rotation_matrix()
    q = delta.compose(base).quaternion
    t = rot @ (base.translation - pivot) + pivot
    return Pose(q, t)


def synth_scene(spec: SceneSpec) -> SceneBundle:
    rng = np.random.default_rng(spec.seed)
    model = synthesize_model(seed=spec.seed, n_subdiv=spec.n_subdiv,
                             k_id=spec.k_id, k_exp=spec.k_exp, k_tex=spec.k_tex)
    camera = Camera.default(spec.size)

    coeffs = FaceCoefficients(
        alpha=rng.normal(0.0, spec.coeff_std, size=spec.k_id),
        beta=rng.normal(0.0, 0.5 * spec.coeff_std, size=spec.k_exp),
        delta=rng.normal(0.0, spec.coeff_std, size=spec.k_tex),
    )
    gamma = np.zeros(9)
    gamma[0] = SH_AMBIENT * rng.uniform(0.82, 0.95)
    gamma[1:4] = rng.normal(0.0, 0.35, size=3)
    gamma[4:] = rng.normal(0.0, 0.12, size=5)

    shape = evaluate_shape(model, coeffs.alpha, coeffs.beta)
    albedo = evaluate_texture(model, coeffs.delta)
    hair = _hair_shell(model, shape, spec.hair_offset_mm, spec.hair_texture_freq, rng)

    base_pose = Pose.from_axis_angle(
        rng.normal(size=3), np.radians(rng.uniform(0.5, 3.0)),
        translation=[rng.uniform(-15, 15), rng.uniform(-15, 15), spec.head_distance_mm])
    pivot = apply_pose(shape, base_pose).mean(axis=0)
    poses = [base_pose, _view_pose(base_pose, spec.yaw2_deg, pivot)]

    background = _background_plate(spec.size, rng)
    noise_fields = [rng.normal(0.0, 1.0, size=(spec.size, spec.size, 3)) for _ in range(2)]

    views = []
    for pose, noise_field in zip(poses, noise_fields):
        views.append(_render_view(model, shape, albedo, hair, gamma, pose, camera,
                                  background, spec.noise, noise_field))
    return SceneBundle(spec=spec, model=model, coeffs=coeffs, gamma=gamma,
                       camera=camera, views=views, hair_mesh_model=hair,
                       background=background)


def _render_view(model: MorphableModel, shape: np.ndarray, albedo: np.ndarray,
                 hair: TriMesh3D, gamma: np.ndarray, pose: Pose, camera: Camera,
                 background: np.ndarray, noise: float,
                 noise_field: np.ndarray) -> SceneView:
    face_verts = apply_pose(shape, pose)
    normals = compute_vertex_normals(face_verts, model.triangles)
    face_colors = shade(albedo, _safe_unit(normals), gamma)
    face_mesh = TriMesh3D(vertices=face_verts,
                          triangles=model.triangles.astype(np.int64),
                          colors=face_colors)
    hair_mesh = TriMesh3D(vertices=apply_pose(hair.vertices, pose),
                          triangles=hair.triangles, colors=hair.colors)

    face_out = rasterize(face_mesh, camera)
    hair_out = rasterize(hair_mesh, camera)

    f_mask = face_out.mask
    hair_cov = hair_out.mask
    s = f_mask | hair_cov
    face_in_front = f_mask & (~hair_cov | (face_out.depth <= hair_out.depth))
    s_f = face_in_front
    s_h = hair_cov & (~f_mask | (hair_out.depth < face_out.depth))

    image = background.copy()
    image[face_in_front] = face_out.color[face_in_front]
    image[s_h] = hair_out.color[s_h]
    if noise > 0:
        image = image + noise * noise_field
    image = np.clip(image, 0.0, 1.0)

    depth = np.full(s.shape, np.nan)
    depth[s] = np.minimum(face_out.depth, hair_out.depth)[s]

    masks = RegionMasks(S=s, S_f=s_f, S_h=s_h, F=f_mask)
    compute_hair_region(masks)
    masks.validate()

    lm_pts = face_verts[model.landmark_indices.astype(np.int64)]
    uv, _, valid = project(lm_pts, camera)
    landmarks = LandmarkSet(
        vertex_indices=np.arange(len(model.landmark_indices)),
        positions=uv,
        weights=valid.astype(np.float64))

    return SceneView(image=image, masks=masks, depth_gt=depth,
                     face_depth_gt=face_out.depth_map(), pose=pose,
                     landmarks=landmarks)


def perturbed_init(bundle: SceneBundle, view_index: int = 0,
                   coeff_noise_frac: float = 0.2, rotation_deg: float = 5.0,
                   translation_mm: float = 20.0, seed: int = 0):
    """Ground truth corrupted into a fitting start: coefficient noise is a
    fraction of the scene's coefficient scale, the pose gets a random-axis
    rotation and a random translation of the given magnitudes."""
    from .losses import FaceParams

    rng = np.random.default_rng(seed)
    spec = bundle.spec
    pose = bundle.views[view_index].pose
    axis = rng.normal(size=3)
    tweak = Pose.from_axis_angle(axis, np.radians(rotation_deg))
    t_dir = rng.normal(size=3)
    t_dir /= np.linalg.norm(t_dir)
    return FaceParams(
        alpha=bundle.coeffs.alpha + rng.normal(0, coeff_noise_frac * spec.coeff_std,
                                               size=spec.k_id),
        beta=bundle.coeffs.beta + rng.normal(0, coeff_noise_frac * 0.5 * spec.coeff_std,
                                             size=spec.k_exp),
        delta=bundle.coeffs.delta + rng.normal(0, coeff_noise_frac * spec.coeff_std,
                                               size=spec.k_tex),
        gamma=bundle.gamma + rng.normal(0, 0.05, size=9),
        quaternion=tweak.compose(Pose(pose.quaternion, np.zeros(3))).quaternion,
        translation=pose.translation + translation_mm * t_dir,
    )
