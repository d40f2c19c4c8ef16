"""Objective terms for the two fitting stages, each returning its value and
analytic gradient.

Face stage: photometric term over the rendered face region, 2D landmark
term, and coefficient regularization, combined by ``face_energy`` over a
frozen rasterization state (pixel-to-triangle assignment and shading normals
held fixed within an iteration; geometry gradients flow through the observed
image via the projected positions).

Depth stage: cross-view color constancy and gradient discrepancy in sampling
form (source pixels are back-projected, transformed, and compared against
bilinear samples of the other view), plus Laplacian smoothness, face-depth
anchoring, and the hair-over-face layer-order hinge, combined by
``depth_energy``.

Region integrals are normalized by the pixel count of their integration
region.  All arithmetic is float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .geometry import Camera, Pose, RegionMasks, pixel_rays, quat_to_matrix, relative_pose
from .model import MorphableModel
from .render import interpolate_attribute, rasterize, sample_bilinear, sh_basis
from . import render as _render
from .geometry import TriMesh3D, apply_pose

_EPS = 1e-12


class EmptyRegionError(ValueError):
    """Raised when a loss's integration region contains no pixels."""


@dataclass
class LossWeights:
    """Non-negative term weights; the defaults drive the shipped pipelines."""

    w_photo: float = 1.9
    w_lmk: float = 1.6e-3
    w_reg_id: float = 3e-4
    w_reg_exp: float = 8e-4
    w_reg_tex: float = 1.7e-5
    w_color: float = 1.0
    w_grad: float = 1.0
    # A heavier smoothness prior (0.05) makes harmonically initialized depth
    # a lower-energy state than the true layered surface: real hair-over-face
    # discontinuities carry most of the Laplacian mass, so the prior must
    # stay weak enough for the data terms to pay for them.
    w_smooth: float = 0.01
    w_face: float = 1.0
    w_layer: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise KeyError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in mapping.items()})


@dataclass
class LandmarkSet:
    """Observed 2D landmarks: model vertex ids, continuous pixel positions,
    per-landmark confidence weights (default 1)."""

    vertex_indices: np.ndarray
    positions: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.vertex_indices = np.asarray(self.vertex_indices, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.weights is None:
            self.weights = np.ones(len(self.vertex_indices))
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.vertex_indices)


# ---------------------------------------------------------------------------
# Face-stage terms

def photometric_loss(image: np.ndarray, rendered: np.ndarray,
                     mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the mask of the rgb residual's l2 norm.

    Returns (value, gradient w.r.t. the rendered image).
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyRegionError("empty photometric region")
    res = (np.asarray(rendered, dtype=np.float64)
           - np.asarray(image, dtype=np.float64))[mask]
    norms = np.linalg.norm(res, axis=1)
    value = float(norms.sum() / n)
    grad = np.zeros(np.shape(rendered), dtype=np.float64)
    grad[mask] = res / np.maximum(norms, _EPS)[:, None] / n
    return value, grad


def landmark_loss(projected: np.ndarray, landmarks: LandmarkSet
                  ) -> tuple[float, np.ndarray]:
    """Confidence-weighted mean squared 2D distance.

    Returns (value, gradient w.r.t. the projected positions).
    """
    if len(landmarks) == 0:
        raise EmptyRegionError("empty landmark set")
    diff = np.asarray(projected, dtype=np.float64) - landmarks.positions
    w = landmarks.weights
    value = float((w * (diff ** 2).sum(axis=1)).sum() / len(landmarks))
    grad = 2.0 * w[:, None] * diff / len(landmarks)
    return value, grad


def coef_regularization(alpha, beta, delta, model: MorphableModel,
                        weights: LossWeights):
    """Sum of w * ||coeff/scale||^2 per coefficient block.

    Returns (value, (g_alpha, g_beta, g_delta), per-block breakdown).
    """
    out_grads = []
    parts = {}
    total = 0.0
    for name, coeff, scales, w in (
            ("reg_id", alpha, model.coeff_scales_id, weights.w_reg_id),
            ("reg_exp", beta, model.coeff_scales_exp, weights.w_reg_exp),
            ("reg_tex", delta, model.coeff_scales_tex, weights.w_reg_tex)):
        c = np.asarray(coeff, dtype=np.float64)
        s = np.asarray(scales, dtype=np.float64)
        term = float(((c / s) ** 2).sum())
        parts[name] = term
        total += w * term
        out_grads.append(2.0 * w * c / s ** 2)
    return total, tuple(out_grads), parts


# ---------------------------------------------------------------------------
# Depth-stage terms

def _image_gradients(image: np.ndarray) -> np.ndarray:
    """Forward-difference gradients, last row/column excluded -> (h-1, w-1, 6)
    channel layout (dx_r, dx_g, dx_b, dy_r, dy_g, dy_b)."""
    img = np.asarray(image, dtype=np.float64)
    gx = img[:-1, 1:] - img[:-1, :-1]
    gy = img[1:, :-1] - img[:-1, :-1]
    return np.concatenate([gx, gy], axis=2)


class CrossViewTerm:
    """One direction of a sampling-form cross-view data term.

    Source pixels in the region are back-projected with their depth,
    transformed into the target camera, and compared (l1) against bilinear
    samples of the target signal; out-of-bounds landings are dropped from
    the mean.  Depth-independent quantities are precomputed so repeated
    evaluation against new depth values is cheap.
    """

    def __init__(self, src_signal: np.ndarray, dst_signal: np.ndarray,
                 region: np.ndarray, pose_src: Pose, pose_dst: Pose,
                 camera: Camera):
        region = np.asarray(region, dtype=bool)
        h, w = dst_signal.shape[:2]
        iy, ix = np.nonzero(region)
        # source values are integer-pixel lookups; keep only pixels that
        # exist on the (possibly cropped) source signal grid
        keep = (ix <= src_signal.shape[1] - 1) & (iy <= src_signal.shape[0] - 1)
        self.ix, self.iy = ix[keep], iy[keep]
        self.src_values = np.asarray(src_signal, dtype=np.float64)[self.iy, self.ix]
        if self.src_values.ndim == 1:
            self.src_values = self.src_values[:, None]
        self.dst_signal = np.asarray(dst_signal, dtype=np.float64)
        rel = relative_pose(pose_src, pose_dst)
        rays = pixel_rays(np.stack([self.ix, self.iy], axis=1), camera)
        self.dirs = rays @ rel.rotation_matrix().T   # dX/dd per pixel
        self.offset = rel.translation
        self.camera = camera

    def __len__(self) -> int:
        return len(self.ix)

    def evaluate(self, depth: np.ndarray) -> tuple[float, int, np.ndarray]:
        """Returns (sum of per-pixel l1 residuals over valid landings,
        valid count, gradient w.r.t. the full depth array of that SUM)."""
        cam = self.camera
        d = np.asarray(depth, dtype=np.float64)[self.iy, self.ix]
        x = self.dirs * d[:, None] + self.offset
        z = x[:, 2]
        front = z > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.focal * x[:, 0] / z + cam.principal_point[0]
            v = cam.focal * x[:, 1] / z + cam.principal_point[1]
        grid = np.stack([u - 0.5, v - 0.5], axis=1)
        grid[~front] = -1.0  # force invalid
        samples, sgrad, in_bounds = sample_bilinear(self.dst_signal, grid)
        valid = front & in_bounds

        res = self.src_values - samples
        res[~valid] = 0.0
        value = float(np.abs(res).sum())
        n_valid = int(valid.sum())

        sign = np.sign(res)
        # d|r|/du = -sign(r) . dS/du ; chain through the pinhole projection
        du = (sign * sgrad[:, 0]).sum(axis=1)
        dv = (sign * sgrad[:, 1]).sum(axis=1)
        zz = np.where(valid, z, 1.0)
        du_dd = cam.focal * (self.dirs[:, 0] * zz - x[:, 0] * self.dirs[:, 2]) / zz ** 2
        dv_dd = cam.focal * (self.dirs[:, 1] * zz - x[:, 1] * self.dirs[:, 2]) / zz ** 2
        per_pixel = -(du * du_dd + dv * dv_dd)
        per_pixel[~valid] = 0.0

        grad = np.zeros(depth.shape, dtype=np.float64)
        grad[self.iy, self.ix] = per_pixel
        return value, n_valid, grad


def _paired_cross_view(signal1, signal2, d1, d2, pose1: Pose, pose2: Pose,
                       camera: Camera, region1, region2):
    t12 = CrossViewTerm(signal1, signal2, region1, pose1, pose2, camera)
    t21 = CrossViewTerm(signal2, signal1, region2, pose2, pose1, camera)
    v12, n12, g1 = t12.evaluate(d1)
    v21, n21, g2 = t21.evaluate(d2)
    if n12 == 0 and n21 == 0:
        raise EmptyRegionError("no valid cross-view landings in either direction")
    value = 0.0
    if n12:
        value += v12 / n12
        g1 /= n12
    if n21:
        value += v21 / n21
        g2 /= n21
    return value, g1, g2


def color_constancy_loss(image1, image2, d1, d2, pose1: Pose, pose2: Pose,
                         camera: Camera, masks1: RegionMasks, masks2: RegionMasks):
    """Symmetric cross-view brightness error over the hair/ear regions.

    Returns (value, grad_d1, grad_d2)."""
    return _paired_cross_view(image1, image2, d1, d2, pose1, pose2, camera,
                              _hair_region(masks1), _hair_region(masks2))


def gradient_loss(image1, image2, d1, d2, pose1: Pose, pose2: Pose,
                  camera: Camera, masks1: RegionMasks, masks2: RegionMasks):
    """Cross-view forward-difference gradient discrepancy (illumination
    robust); source pixel gradients against sampled target gradients.

    Returns (value, grad_d1, grad_d2)."""
    g1_img = _image_gradients(image1)
    g2_img = _image_gradients(image2)
    return _paired_cross_view(g1_img, g2_img, d1, d2, pose1, pose2, camera,
                              _hair_region(masks1), _hair_region(masks2))


def _hair_region(masks: RegionMasks) -> np.ndarray:
    if masks.H is None:
        from .geometry import compute_hair_region
        compute_hair_region(masks)
    return masks.H


def smoothness_loss(depth: np.ndarray, head_mask: np.ndarray
                    ) -> tuple[float, np.ndarray]:
    """Mean absolute 5-point Laplacian over interior head pixels (all four
    neighbors inside the mask).  Returns (value, grad_d)."""
    s = np.asarray(head_mask, dtype=bool)
    d = np.asarray(depth, dtype=np.float64)
    interior = np.zeros_like(s)
    interior[1:-1, 1:-1] = (s[1:-1, 1:-1] & s[:-2, 1:-1] & s[2:, 1:-1]
                            & s[1:-1, :-2] & s[1:-1, 2:])
    n = int(interior.sum())
    if n == 0:
        raise EmptyRegionError("no interior pixels for the smoothness stencil")

    lap = np.zeros_like(d)
    lap[1:-1, 1:-1] = (d[:-2, 1:-1] + d[2:, 1:-1] + d[1:-1, :-2] + d[1:-1, 2:]
                       - 4.0 * d[1:-1, 1:-1])
    lap[~interior] = 0.0
    value = float(np.abs(lap[interior]).sum() / n)

    sgn = np.zeros_like(d)
    sgn[interior] = np.sign(lap[interior]) / n
    grad = -4.0 * sgn
    grad[:-2, 1:-1] += sgn[1:-1, 1:-1]
    grad[2:, 1:-1] += sgn[1:-1, 1:-1]
    grad[1:-1, :-2] += sgn[1:-1, 1:-1]
    grad[1:-1, 2:] += sgn[1:-1, 1:-1]
    return value, grad


def _face_anchor_region(masks: RegionMasks) -> np.ndarray:
    region = masks.F & ~(masks.S_h & masks.F)
    # the depth map is only defined on the head region
    return region & masks.S


def face_depth_loss(depth: np.ndarray, face_depth: np.ndarray,
                    masks: RegionMasks) -> tuple[float, np.ndarray]:
    """Mean |d - d_face| over the unoccluded rendered-face region.

    Returns (value, grad_d)."""
    region = _face_anchor_region(masks)
    n = int(region.sum())
    if n == 0:
        raise EmptyRegionError("empty face-depth region")
    diff = np.asarray(depth, dtype=np.float64) - np.asarray(face_depth, dtype=np.float64)
    value = float(np.abs(diff[region]).sum() / n)
    grad = np.zeros_like(diff)
    grad[region] = np.sign(diff[region]) / n
    return value, grad


def layer_order_loss(depth: np.ndarray, face_depth: np.ndarray,
                     masks: RegionMasks) -> tuple[float, np.ndarray]:
    """Hinge penalty max(0, d - d_face) averaged over hair-over-face pixels;
    an empty overlap yields 0 with a warning.  Returns (value, grad_d)."""
    region = masks.S_h & masks.F
    n = int(region.sum())
    grad = np.zeros(np.shape(depth), dtype=np.float64)
    if n == 0:
        warnings.warn("hair-face overlap is empty; layer-order loss is 0", stacklevel=2)
        return 0.0, grad
    diff = (np.asarray(depth, dtype=np.float64)
            - np.asarray(face_depth, dtype=np.float64))[region]
    value = float(np.maximum(diff, 0.0).sum() / n)
    g = np.zeros(n)
    g[diff > 0] = 1.0 / n
    grad[region] = g
    return value, grad


# ---------------------------------------------------------------------------
# Face energy over a frozen rasterization state

@dataclass
class FaceParams:
    """Face-stage unknowns: shape/texture coefficients, lighting, pose."""

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))

    def copy(self) -> "FaceParams":
        return FaceParams(*(getattr(self, f.name).copy() for f in fields(self)))

    def pose(self) -> Pose:
        return Pose(self.quaternion.copy(), self.translation.copy())


@dataclass
class FrozenFaceState:
    """Per-iteration rasterization state: the pixel-to-triangle assignment,
    barycentric weights, and shading basis are frozen; coefficients, lighting
    and pose stay live in the energy."""

    vert_ids: np.ndarray    # (p, 3) model vertex ids per covered pixel
    bary: np.ndarray        # (p, 3)
    pixel_xy: np.ndarray    # (p, 2) integer (ix, iy)
    sh_vals: np.ndarray     # (n_vertices, 9) frozen SH basis of current normals
    coverage: np.ndarray    # (h, w) rendered face coverage F
    photo_region: np.ndarray  # (h, w) region the photometric mean runs over

    @property
    def n_pixels(self) -> int:
        return len(self.vert_ids)


def freeze_face_state(model: MorphableModel, params: FaceParams, camera: Camera,
                      face_mask: np.ndarray | None = None) -> FrozenFaceState:
    """Rasterize the current face and freeze the correspondence state.

    ``face_mask`` (e.g. the segmented face region) restricts the photometric
    region to coverage that actually shows skin; occluded coverage would
    otherwise drag the fit toward hair pixels.
    """
    from .model import evaluate_shape

    verts = apply_pose(evaluate_shape(model, params.alpha, params.beta), params.pose())
    normals = _render.compute_vertex_normals(verts, model.triangles)
    sh_vals = sh_basis(_render._safe_unit(normals))
    mesh = TriMesh3D(vertices=verts, triangles=model.triangles.astype(np.int64))
    out = rasterize(mesh, camera)

    region = out.mask if face_mask is None else (out.mask & np.asarray(face_mask, dtype=bool))
    iy, ix = np.nonzero(region)
    ids = out.tri_id[iy, ix]
    return FrozenFaceState(
        vert_ids=model.triangles.astype(np.int64)[ids],
        bary=out.bary[iy, ix],
        pixel_xy=np.stack([ix, iy], axis=1),
        sh_vals=sh_vals,
        coverage=out.mask,
        photo_region=region,
    )


def _quat_rotate_jac_tensor(q: np.ndarray) -> np.ndarray:
    """A[k, i, j] = d(R(q) v)_i / dq_k as a coefficient of v_j, for unit q.

    From R(q) v = (w^2 - u.u) v + 2 (u.v) u + 2 w (u x v) with q = (w, u).
    """
    w, ux, uy, uz = q
    u = np.array([ux, uy, uz])
    eye = np.eye(3)
    eps = np.zeros((3, 3, 3))
    eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
    eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
    ucross = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    a = np.empty((4, 3, 3))
    a[0] = 2.0 * w * eye + 2.0 * ucross
    for k in range(3):
        a[1 + k] = (-2.0 * u[k] * eye
                    + 2.0 * np.outer(u, eye[k])   # 2 u_i delta_jk
                    + 2.0 * np.outer(eye[k], u)   # 2 delta_ik u_j
                    + 2.0 * w * eps[:, k, :])     # 2 w eps_ikj
    return a


def _project_with_jacobian(x: np.ndarray, camera: Camera):
    """Pinhole projection of camera-space points plus du/dX (m, 2, 3)."""
    z = x[:, 2]
    u = camera.focal * x[:, 0] / z + camera.principal_point[0]
    v = camera.focal * x[:, 1] / z + camera.principal_point[1]
    jac = np.zeros((len(x), 2, 3))
    jac[:, 0, 0] = camera.focal / z
    jac[:, 0, 2] = -camera.focal * x[:, 0] / z ** 2
    jac[:, 1, 1] = camera.focal / z
    jac[:, 1, 2] = -camera.focal * x[:, 1] / z ** 2
    return np.stack([u, v], axis=1), jac


def face_energy(params: FaceParams, model: MorphableModel, image: np.ndarray,
                landmarks: LandmarkSet, camera: Camera, state: FrozenFaceState,
                weights: LossWeights):
    """Weighted face-stage energy and its analytic gradient.

    Evaluated over the frozen correspondence state: geometry changes move the
    sampling positions in the observed image (image-gradient chain rule), and
    texture/lighting changes move the synthesized colors.  Returns
    (value, FaceParams gradient, per-term breakdown).
    """
    from .model import evaluate_shape, evaluate_texture

    if state.n_pixels == 0:
        raise EmptyRegionError("frozen state has no covered pixels")

    qn = np.linalg.norm(params.quaternion)
    qhat = params.quaternion / qn
    rot = quat_to_matrix(qhat)
    verts = evaluate_shape(model, params.alpha, params.beta)
    albedo = evaluate_texture(model, params.delta)

    shade_factor = state.sh_vals @ params.gamma                # (n,)
    raw = albedo * shade_factor[:, None]
    colors = np.clip(raw, 0.0, 1.0)
    unclamped = (raw > 0.0) & (raw < 1.0)

    grads = FaceParams(np.zeros_like(params.alpha), np.zeros_like(params.beta),
                       np.zeros_like(params.delta), np.zeros_like(params.gamma),
                       np.zeros(4), np.zeros(3))

    # --- photometric term over the frozen pixel set
    w_pix = state.bary                                         # (p, 3)
    vids = state.vert_ids                                      # (p, 3)
    v_model = np.einsum("pc,pcj->pj", w_pix, verts[vids])      # (p, 3)
    x_cam = v_model @ rot.T + params.translation
    uv, uv_jac = _project_with_jacobian(x_cam, camera)

    img = np.asarray(image, dtype=np.float64)
    samples, sgrad, _ = sample_bilinear(img, uv - 0.5, oob="clamp")
    c_pix = np.einsum("pc,pcj->pj", w_pix, colors[vids])
    res = samples - c_pix                                      # (p, 3)
    norms = np.linalg.norm(res, axis=1)
    n_pix = state.n_pixels
    l_photo = float(norms.sum() / n_pix)
    rhat = res / np.maximum(norms, _EPS)[:, None] / n_pix      # d l_photo / d res

    # color path: d res / d c_pix = -I
    vertex_pull = np.zeros_like(colors)                        # (n, 3)
    for k in range(3):
        np.add.at(vertex_pull, vids[:, k], -rhat * w_pix[:, k:k + 1])
    color_pull = vertex_pull * unclamped
    bt = model.basis_tex.astype(np.float64).reshape(model.n_vertices, 3, model.k_tex)
    g_delta_photo = np.einsum("nc,nck->k", color_pull * shade_factor[:, None], bt)
    g_gamma_photo = np.einsum("nc,nj->j", color_pull * albedo, state.sh_vals)

    # geometry path: d res / d uv = image spatial gradient
    duv = np.einsum("pc,pdc->pd", rhat, sgrad)                 # (p, 2)
    h_cam = np.einsum("pd,pdj->pj", duv, uv_jac)               # d l_photo / d x_cam
    g_trans_photo = h_cam.sum(axis=0)
    g_model_pts = h_cam @ rot                                  # d / d v_model
    pos_pull = np.zeros_like(verts)
    for k in range(3):
        np.add.at(pos_pull, vids[:, k], g_model_pts * w_pix[:, k:k + 1])
    moment = np.einsum("pi,pj->ij", h_cam, v_model)            # for the quaternion chain

    # --- landmark term
    lm_ids = model.landmark_indices[landmarks.vertex_indices]
    v_lm = verts[lm_ids]
    x_lm = v_lm @ rot.T + params.translation
    uv_lm, uv_lm_jac = _project_with_jacobian(x_lm, camera)
    l_lmk, g_uv_lm = landmark_loss(uv_lm, landmarks)
    h_lm = np.einsum("pd,pdj->pj", g_uv_lm, uv_lm_jac)
    g_trans_lmk = h_lm.sum(axis=0)
    g_model_lm = h_lm @ rot
    moment_lm = np.einsum("pi,pj->ij", h_lm, v_lm)
    lm_pull = np.zeros_like(verts)
    np.add.at(lm_pull, lm_ids, g_model_lm)

    # --- regularization
    l_reg, (g_alpha_reg, g_beta_reg, g_delta_reg), reg_parts = coef_regularization(
        params.alpha, params.beta, params.delta, model, weights)

    # --- assemble
    bid = model.basis_id.astype(np.float64).reshape(model.n_vertices, 3, model.k_id)
    bexp = model.basis_exp.astype(np.float64).reshape(model.n_vertices, 3, model.k_exp)
    total_pos_pull = weights.w_photo * pos_pull + weights.w_lmk * lm_pull
    grads.alpha = np.einsum("nc,nck->k", total_pos_pull, bid) + g_alpha_reg
    grads.beta = np.einsum("nc,nck->k", total_pos_pull, bexp) + g_beta_reg
    grads.delta = weights.w_photo * g_delta_photo + g_delta_reg
    grads.gamma = weights.w_photo * g_gamma_photo

    jac_q = _quat_rotate_jac_tensor(qhat)                      # (4, 3, 3)
    total_moment = weights.w_photo * moment + weights.w_lmk * moment_lm
    g_qhat = np.einsum("kij,ij->k", jac_q, total_moment)
    grads.quaternion = (np.eye(4) - np.outer(qhat, qhat)) @ g_qhat / qn
    grads.translation = weights.w_photo * g_trans_photo + weights.w_lmk * g_trans_lmk

    value = weights.w_photo * l_photo + weights.w_lmk * l_lmk + l_reg
    breakdown = {"photo": l_photo, "landmark": l_lmk, **reg_parts, "energy": value}
    return value, grads, breakdown


# ---------------------------------------------------------------------------
# Depth-pair energy

@dataclass
class DepthPairProblem:
    """Precomputed state for the two-view depth energy: cross-view terms in
    both directions for brightness and gradients, plus the per-view prior
    regions.  Depth arrays are full-image float64 with NaN outside the head."""

    image1: np.ndarray
    image2: np.ndarray
    masks1: RegionMasks
    masks2: RegionMasks
    face_depth1: np.ndarray
    face_depth2: np.ndarray
    pose1: Pose
    pose2: Pose
    camera: Camera
    color_12: CrossViewTerm = field(init=False)
    color_21: CrossViewTerm = field(init=False)
    grad_12: CrossViewTerm = field(init=False)
    grad_21: CrossViewTerm = field(init=False)

    def __post_init__(self):
        self.image1 = np.asarray(self.image1, dtype=np.float64)
        self.image2 = np.asarray(self.image2, dtype=np.float64)
        h1 = _hair_region(self.masks1)
        h2 = _hair_region(self.masks2)
        self.color_12 = CrossViewTerm(self.image1, self.image2, h1,
                                      self.pose1, self.pose2, self.camera)
        self.color_21 = CrossViewTerm(self.image2, self.image1, h2,
                                      self.pose2, self.pose1, self.camera)
        g1 = _image_gradients(self.image1)
        g2 = _image_gradients(self.image2)
        self.grad_12 = CrossViewTerm(g1, g2, h1, self.pose1, self.pose2, self.camera)
        self.grad_21 = CrossViewTerm(g2, g1, h2, self.pose2, self.pose1, self.camera)


def _directional_pair(t12: CrossViewTerm, t21: CrossViewTerm, d1, d2):
    v12, n12, g1 = t12.evaluate(d1)
    v21, n21, g2 = t21.evaluate(d2)
    value = 0.0
    if n12:
        value += v12 / n12
        g1 /= n12
    if n21:
        value += v21 / n21
        g2 /= n21
    return value, g1, g2, n12 + n21


def depth_energy(d1: np.ndarray, d2: np.ndarray, problem: DepthPairProblem,
                 weights: LossWeights):
    """Weighted two-view depth energy and gradients w.r.t. both depth maps.

    Returns (value, grad_d1, grad_d2, per-term breakdown)."""
    l_color, gc1, gc2, n_color = _directional_pair(problem.color_12, problem.color_21, d1, d2)
    l_grad, gg1, gg2, n_grad = _directional_pair(problem.grad_12, problem.grad_21, d1, d2)
    if n_color == 0 and n_grad == 0:
        raise EmptyRegionError("no valid cross-view landings in either direction")

    l_sm1, gs1 = smoothness_loss(d1, problem.masks1.S)
    l_sm2, gs2 = smoothness_loss(d2, problem.masks2.S)
    l_face1, gf1 = face_depth_loss(d1, problem.face_depth1, problem.masks1)
    l_face2, gf2 = face_depth_loss(d2, problem.face_depth2, problem.masks2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        l_lay1, gl1 = layer_order_loss(d1, problem.face_depth1, problem.masks1)
        l_lay2, gl2 = layer_order_loss(d2, problem.face_depth2, problem.masks2)

    w = weights
    value = (w.w_color * l_color + w.w_grad * l_grad
             + w.w_smooth * (l_sm1 + l_sm2)
             + w.w_face * (l_face1 + l_face2)
             + w.w_layer * (l_lay1 + l_lay2))
    grad1 = (w.w_color * gc1 + w.w_grad * gg1 + w.w_smooth * gs1
             + w.w_face * gf1 + w.w_layer * gl1)
    grad2 = (w.w_color * gc2 + w.w_grad * gg2 + w.w_smooth * gs2
             + w.w_face * gf2 + w.w_layer * gl2)
    breakdown = {
        "color": l_color, "grad": l_grad,
        "smooth": l_sm1 + l_sm2, "face": l_face1 + l_face2,
        "layer": l_lay1 + l_lay2, "energy": value,
    }
    return value, grad1, grad2, breakdown


def single_depth_energy(d: np.ndarray, face_depth: np.ndarray, masks: RegionMasks,
                        weights: LossWeights):
    """Prior-only single-view depth energy (no cross-view data terms).

    Returns (value, grad_d, breakdown)."""
    l_sm, gs = smoothness_loss(d, masks.S)
    l_face, gf = face_depth_loss(d, face_depth, masks)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        l_lay, gl = layer_order_loss(d, face_depth, masks)
    value = weights.w_smooth * l_sm + weights.w_face * l_face + weights.w_layer * l_lay
    grad = weights.w_smooth * gs + weights.w_face * gf + weights.w_layer * gl
    breakdown = {"smooth": l_sm, "face": l_face, "layer": l_lay, "energy": value}
    return value, grad, breakdown
