"""Two-stage reconstruction by per-instance energy minimization.

Stage one fits coefficients, lighting and pose to one image with
adaptive-moment updates; the rasterization correspondence is recomputed and
frozen every iteration.  Stage two optimizes per-pixel depth for an image
pair (or the prior-only single-image fallback), initialized by harmonic
propagation of the rendered face depth.

Both stages are deterministic given (inputs, config, seed); gradient
accumulation uses NumPy's pairwise reductions throughout, so results do not
depend on thread count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .geometry import Camera, Pose, RegionMasks, apply_pose, rigid_align, unproject
from .losses import (DepthPairProblem, EmptyRegionError, FaceParams, LandmarkSet, LossWeights,
                     depth_energy, face_energy, freeze_face_state, single_depth_energy)
from .model import MorphableModel


@dataclass
class FitConfig:
    """Optimizer settings for both stages (all config-file overridable)."""

    weights: LossWeights = field(default_factory=LossWeights)
    face_iterations: int = 200
    depth_iterations: int = 800  # per-pixel Adam at 0.5 mm steps needs the headroom
    step_coeff: float = 1e-2
    step_rotation: float = 2e-3
    step_translation_mm: float = 2.0
    step_depth_mm: float = 0.5
    tolerance: float = 1e-7
    patience: int = 25
    coarse_to_fine: bool = True
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.face_iterations < 1 or self.depth_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class FaceFitResult:
    params: FaceParams
    energy: float
    breakdown: dict
    trace: np.ndarray       # columns: iteration, photo, landmark, reg, energy, best_energy
    iterations_run: int
    converged: bool
    diagnostic: str | None = None

    @property
    def pose(self) -> Pose:
        return self.params.pose()


@dataclass
class DepthFitResult:
    depth1: np.ndarray
    depth2: np.ndarray | None
    energy: float
    breakdown: dict
    trace: np.ndarray
    iterations_run: int
    converged: bool
    degenerate_pair: bool = False
    diagnostic: str | None = None


class _Adam:
    """Adaptive-moment step for a dict of parameter blocks with per-block rates."""

    def __init__(self, steps: dict[str, float], beta1: float, beta2: float, eps: float):
        self.steps = steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            values[name] -= self.steps[name] * mhat / (np.sqrt(vhat) + self.eps)


def _converged(history: list[float], tolerance: float, patience: int) -> bool:
    if len(history) < patience + 1:
        return False
    recent = history[-(patience + 1):]
    drop = recent[0] - min(recent[1:])
    return drop < tolerance * max(abs(recent[0]), 1e-12)


def fit_face(model: MorphableModel, image: np.ndarray, landmarks: LandmarkSet,
             masks: RegionMasks | None, camera: Camera, config: FitConfig,
             init: FaceParams) -> FaceFitResult:
    """First-order minimization of the face energy from the given start.

    The segmented face mask (when provided) restricts the photometric region
    to visible skin.  Returns the best-energy iterate.
    """
    params = init.copy()
    weights = config.weights
    face_mask = masks.S_f if masks is not None else None

    adam = _Adam({"alpha": config.step_coeff, "beta": config.step_coeff,
                  "delta": config.step_coeff, "gamma": config.step_coeff,
                  "quaternion": config.step_rotation,
                  "translation": config.step_translation_mm},
                 config.adam_beta1, config.adam_beta2, config.adam_eps)

    best_params = params.copy()
    best_energy = np.inf
    best_breakdown: dict = {}
    trace_rows = []
    history: list[float] = []
    diagnostic = None
    converged = False
    it = 0

    for it in range(config.face_iterations):
        try:
            state = freeze_face_state(model, params, camera, face_mask)
            energy, grads, breakdown = face_energy(
                params, model, image, landmarks, camera, state, weights)
        except EmptyRegionError as exc:
            diagnostic = f"iteration {it}: {exc}"
            break
        if not np.isfinite(energy):
            diagnostic = f"iteration {it}: non-finite energy"
            break

        if energy < best_energy:
            best_energy = energy
            best_params = params.copy()
            best_breakdown = breakdown
        reg = breakdown["reg_id"] + breakdown["reg_exp"] + breakdown["reg_tex"]
        trace_rows.append([it, breakdown["photo"], breakdown["landmark"], reg,
                           energy, best_energy])
        history.append(energy)
        if _converged(history, config.tolerance, config.patience):
            converged = True
            break

        values = {"alpha": params.alpha, "beta": params.beta, "delta": params.delta,
                  "gamma": params.gamma, "quaternion": params.quaternion,
                  "translation": params.translation}
        gdict = {"alpha": grads.alpha, "beta": grads.beta, "delta": grads.delta,
                 "gamma": grads.gamma, "quaternion": grads.quaternion,
                 "translation": grads.translation}
        adam.update(values, gdict)
        params.quaternion /= np.linalg.norm(params.quaternion)

    if not np.isfinite(best_energy):
        best_params = params.copy()
        best_energy = float("nan")

    return FaceFitResult(
        params=best_params, energy=float(best_energy), breakdown=best_breakdown,
        trace=np.array(trace_rows) if trace_rows else np.zeros((0, 6)),
        iterations_run=it + 1, converged=converged, diagnostic=diagnostic)


# ---------------------------------------------------------------------------
# Depth initialization by harmonic propagation

def init_depth(face_depth: np.ndarray, masks: RegionMasks) -> tuple[np.ndarray, list[str]]:
    """Depth over the whole head region: the rendered face depth where it is
    defined, harmonically extended elsewhere.

    Unknown pixels (head minus rendered-face coverage) satisfy the discrete
    Laplace equation with Dirichlet values from adjacent face-depth pixels
    and mirrored (dropped) links on the remaining boundary.  Components with
    no face contact are filled with the median face depth and flagged.
    Returns (depth with NaN outside the head, flags).
    """
    s = masks.S
    f_mask = masks.F & np.isfinite(face_depth)
    d_f = np.asarray(face_depth, dtype=np.float64)
    h, w = s.shape
    out = np.full((h, w), np.nan)
    out[f_mask & s] = d_f[f_mask & s]

    unknown = s & ~f_mask
    flags: list[str] = []
    n_unknown = int(unknown.sum())
    if n_unknown == 0:
        return out, flags
    if not f_mask.any():
        raise EmptyRegionError("face depth is empty; nothing to propagate")
    median = float(np.median(d_f[f_mask]))

    iy, ix = np.nonzero(unknown)
    index = -np.ones((h, w), dtype=np.int64)
    index[iy, ix] = np.arange(n_unknown)

    rows, cols, vals = [], [], []
    diag = np.zeros(n_unknown)
    rhs = np.zeros(n_unknown)
    anchored = np.zeros(n_unknown, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = iy + dy, ix + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        n_unk = np.zeros(n_unknown, dtype=bool)
        n_face = np.zeros(n_unknown, dtype=bool)
        n_unk[inside] = unknown[ny[inside], nx[inside]]
        n_face[inside] = f_mask[ny[inside], nx[inside]]
        diag += n_unk | n_face
        rows.extend(np.nonzero(n_unk)[0])
        cols.extend(index[ny[n_unk], nx[n_unk]])
        vals.extend(np.full(int(n_unk.sum()), -1.0))
        rhs[n_face] += d_f[ny[n_face], nx[n_face]]
        anchored |= n_face

    link = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_unknown, n_unknown))
    n_comp, labels = connected_components(link, directed=False)
    comp_anchored = np.zeros(n_comp, dtype=bool)
    np.bitwise_or.at(comp_anchored, labels, anchored)

    solvable = comp_anchored[labels] & (diag > 0)
    orphan = ~solvable
    if orphan.any():
        flags.append(f"{int(orphan.sum())} pixels disconnected from face depth; "
                     f"filled with median {median:.3f}")
        out[iy[orphan], ix[orphan]] = median

    if solvable.any():
        sub = np.nonzero(solvable)[0]
        remap = -np.ones(n_unknown, dtype=np.int64)
        remap[sub] = np.arange(len(sub))
        keep = solvable[rows] & solvable[np.asarray(cols, dtype=np.int64)]
        rows_a = remap[np.asarray(rows)[keep]]
        cols_a = remap[np.asarray(cols, dtype=np.int64)[keep]]
        vals_a = np.asarray(vals)[keep]
        mat = sp.coo_matrix(
            (np.concatenate([diag[sub], vals_a]),
             (np.concatenate([np.arange(len(sub)), rows_a]),
              np.concatenate([np.arange(len(sub)), cols_a]))),
            shape=(len(sub), len(sub))).tocsr()
        sol = spsolve(mat, rhs[sub])
        out[iy[sub], ix[sub]] = sol
    return out, flags


def _downsample_scene(image, masks: RegionMasks, face_depth):
    """Half-resolution view for the coarse warm start: 2x2 box-averaged
    image, majority-vote masks, face depth averaged over defined children."""
    h, w = image.shape[:2]
    h2, w2 = h // 2, w // 2
    img = image[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))

    def down_mask(m):
        blocks = m[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2)
        return blocks.sum(axis=(1, 3)) >= 2

    s = down_mask(masks.S)
    s_f = down_mask(masks.S_f) & s
    s_h = down_mask(masks.S_h) & s
    f_m = down_mask(masks.F & np.isfinite(face_depth))
    small = RegionMasks(S=s, S_f=s_f, S_h=s_h, F=f_m)
    from .geometry import compute_hair_region
    compute_hair_region(small)

    df = np.where(np.isfinite(face_depth), face_depth, 0.0)[:2 * h2, :2 * w2]
    cnt = np.isfinite(face_depth).astype(np.float64)[:2 * h2, :2 * w2]
    df_sum = df.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    cnt_sum = cnt.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        df_small = np.where(cnt_sum > 0, df_sum / np.maximum(cnt_sum, 1), np.nan)
    df_small[~f_m] = np.nan
    return img, small, df_small


def _upsample_depth(depth_small: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor 2x upsample back to the full grid."""
    up = np.repeat(np.repeat(depth_small, 2, axis=0), 2, axis=1)
    out = np.full(shape, np.nan)
    hh = min(shape[0], up.shape[0])
    ww = min(shape[1], up.shape[1])
    out[:hh, :ww] = up[:hh, :ww]
    return out


def _relative_rotation_deg(pose1: Pose, pose2: Pose) -> float:
    from .geometry import relative_pose
    q = relative_pose(pose1, pose2).quaternion
    return float(np.degrees(2.0 * np.arccos(np.clip(abs(q[0]), -1.0, 1.0))))


def _run_depth_adam(d_init1, d_init2, problem: DepthPairProblem, config: FitConfig,
                    iterations: int):
    s1 = problem.masks1.S
    s2 = problem.masks2.S
    d1 = d_init1.copy()
    d2 = d_init2.copy()
    adam = _Adam({"d1": config.step_depth_mm, "d2": config.step_depth_mm},
                 config.adam_beta1, config.adam_beta2, config.adam_eps)
    best = (d1.copy(), d2.copy())
    best_energy = np.inf
    best_breakdown: dict = {}
    trace_rows = []
    history: list[float] = []
    diagnostic = None
    converged = False
    it = 0
    for it in range(iterations):
        energy, g1, g2, breakdown = depth_energy(d1, d2, problem, config.weights)
        if not np.isfinite(energy):
            diagnostic = f"iteration {it}: non-finite energy"
            break
        if energy < best_energy:
            best_energy = energy
            best = (d1.copy(), d2.copy())
            best_breakdown = breakdown
        trace_rows.append([it, breakdown["color"], breakdown["grad"], breakdown["smooth"],
                           breakdown["face"], breakdown["layer"], energy, best_energy])
        history.append(energy)
        if _converged(history, config.tolerance, config.patience):
            converged = True
            break
        g1[~s1] = 0.0
        g2[~s2] = 0.0
        values = {"d1": d1, "d2": d2}
        adam.update(values, {"d1": g1, "d2": g2})
        d1[~s1] = np.nan
        d2[~s2] = np.nan
    return best, best_energy, best_breakdown, trace_rows, it + 1, converged, diagnostic


def fit_depth_pair(image1, image2, masks1: RegionMasks, masks2: RegionMasks,
                   face_depth1, face_depth2, pose1: Pose, pose2: Pose,
                   camera: Camera, config: FitConfig,
                   condition_on_face: bool = True) -> DepthFitResult:
    """Joint per-pixel depth optimization for a stereo-consistent pair.

    ``condition_on_face=False`` ablates the face-depth conditioning: flat
    median initialization instead of harmonic propagation and zeroed
    face/layer weights.
    """
    degenerate = _relative_rotation_deg(pose1, pose2) < 1.0
    if degenerate:
        warnings.warn("relative rotation below 1 degree; depth is smoothness-dominated",
                      stacklevel=2)

    weights = config.weights
    if not condition_on_face:
        from dataclasses import replace
        weights = replace(weights, w_face=0.0, w_layer=0.0)
        config = _with_weights(config, weights)

    def initialize(masks, face_depth):
        if condition_on_face:
            d, _ = init_depth(face_depth, masks)
            return d
        median = float(np.median(face_depth[np.isfinite(face_depth)]))
        d = np.full(face_depth.shape, np.nan)
        d[masks.S] = median
        return d

    d1 = initialize(masks1, face_depth1)
    d2 = initialize(masks2, face_depth2)

    if config.coarse_to_fine and min(image1.shape[0], image1.shape[1]) >= 32:
        im1s, m1s, df1s = _downsample_scene(image1, masks1, face_depth1)
        im2s, m2s, df2s = _downsample_scene(image2, masks2, face_depth2)
        cam_s = Camera(camera.focal / 2.0, camera.principal_point / 2.0,
                       camera.width // 2, camera.height // 2)
        if m1s.H.any() and m2s.H.any() and m1s.S.any() and m2s.S.any():
            try:
                prob_s = DepthPairProblem(im1s, im2s, m1s, m2s, df1s, df2s,
                                          pose1, pose2, cam_s)
                d1s = _shrink_to(d1, m1s)
                d2s = _shrink_to(d2, m2s)
                (d1s, d2s), *_ = _run_depth_adam(d1s, d2s, prob_s, config,
                                                 config.depth_iterations // 2)
                d1 = _merge_coarse(d1, d1s, masks1.S)
                d2 = _merge_coarse(d2, d2s, masks2.S)
            except EmptyRegionError:
                pass

    problem = DepthPairProblem(image1, image2, masks1, masks2,
                               face_depth1, face_depth2, pose1, pose2, camera)
    (bd1, bd2), energy, breakdown, rows, n_it, converged, diagnostic = _run_depth_adam(
        d1, d2, problem, config, config.depth_iterations)
    return DepthFitResult(
        depth1=bd1, depth2=bd2, energy=float(energy), breakdown=breakdown,
        trace=np.array(rows) if rows else np.zeros((0, 8)),
        iterations_run=n_it, converged=converged,
        degenerate_pair=degenerate, diagnostic=diagnostic)


def _with_weights(config: FitConfig, weights: LossWeights) -> FitConfig:
    from dataclasses import replace
    return replace(config, weights=weights)


def _shrink_to(depth_full: np.ndarray, masks_small: RegionMasks) -> np.ndarray:
    """Box-average a full-resolution depth onto the half grid, filling the
    small head mask (median where no defined children)."""
    h2, w2 = masks_small.S.shape
    vals = np.where(np.isfinite(depth_full), depth_full, 0.0)[:2 * h2, :2 * w2]
    cnt = np.isfinite(depth_full).astype(np.float64)[:2 * h2, :2 * w2]
    v = vals.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    c = cnt.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    out = np.full((h2, w2), np.nan)
    have = (c > 0) & masks_small.S
    out[have] = v[have] / c[have]
    missing = masks_small.S & ~have
    if missing.any():
        out[missing] = np.nanmedian(out[masks_small.S]) if have.any() else 1000.0
    return out


def _merge_coarse(depth_full: np.ndarray, depth_small: np.ndarray,
                  s_full: np.ndarray) -> np.ndarray:
    up = _upsample_depth(depth_small, depth_full.shape)
    out = depth_full.copy()
    use = s_full & np.isfinite(up)
    out[use] = up[use]
    out[~s_full] = np.nan
    return out


def fit_depth_single(image, masks: RegionMasks, face_depth, config: FitConfig
                     ) -> DepthFitResult:
    """Prior-only single-image depth: smoothness + face anchoring + layer
    order from the harmonic initialization.  A stand-in for amortized
    single-image inference, not a reconstruction of unseen geometry."""
    d, flags = init_depth(face_depth, masks)
    s = masks.S
    adam = _Adam({"d": config.step_depth_mm},
                 config.adam_beta1, config.adam_beta2, config.adam_eps)
    best = d.copy()
    best_energy = np.inf
    best_breakdown: dict = {}
    rows = []
    history: list[float] = []
    converged = False
    diagnostic = "; ".join(flags) if flags else None
    it = 0
    for it in range(config.depth_iterations):
        energy, grad, breakdown = single_depth_energy(d, face_depth, masks, config.weights)
        if not np.isfinite(energy):
            diagnostic = f"iteration {it}: non-finite energy"
            break
        if energy < best_energy:
            best_energy = energy
            best = d.copy()
            best_breakdown = breakdown
        rows.append([it, breakdown["smooth"], breakdown["face"], breakdown["layer"],
                     energy, best_energy])
        history.append(energy)
        if _converged(history, config.tolerance, config.patience):
            converged = True
            break
        grad[~s] = 0.0
        adam.update({"d": d}, {"d": grad})
        d[~s] = np.nan
    return DepthFitResult(
        depth1=best, depth2=None, energy=float(best_energy), breakdown=best_breakdown,
        trace=np.array(rows) if rows else np.zeros((0, 6)),
        iterations_run=it + 1, converged=converged, diagnostic=diagnostic)


# ---------------------------------------------------------------------------
# Verification helpers

def finite_difference_gradient(func, x: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a
    time; the workhorse of the gradient-checking suite."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        grad.flat[i] = (func(xp) - func(xm)) / (2.0 * step)
    return grad


def evaluate_reconstruction(pred_points: np.ndarray, gt_points: np.ndarray,
                            face_flags: np.ndarray) -> tuple[float, float]:
    """Mean 3D point distance (mm) after rigid alignment of the union,
    reported separately for the face and non-face partition sides."""
    face_flags = np.asarray(face_flags, dtype=bool)
    if not face_flags.any() or face_flags.all():
        raise ValueError("partition must contain both face and non-face points")
    pose, _ = rigid_align(pred_points, gt_points)
    dist = np.linalg.norm(apply_pose(pred_points, pose) - gt_points, axis=1)
    return float(dist[face_flags].mean()), float(dist[~face_flags].mean())


def depth_map_points(pred_depth: np.ndarray, gt_depth: np.ndarray,
                     masks: RegionMasks, camera: Camera):
    """Pixel-correspondence point pairs for depth-map evaluation.

    Returns (pred (m, 3), gt (m, 3), face flags (m,)) over head pixels where
    both maps are defined; the face side of the partition is the rendered
    face coverage."""
    both = masks.S & np.isfinite(pred_depth) & np.isfinite(gt_depth)
    if not both.any():
        raise EmptyRegionError("no commonly defined pixels")
    pred_pts, pixels = unproject(pred_depth, both, camera)
    gt_pts, _ = unproject(gt_depth, both, camera)
    face_flags = masks.F[pixels[:, 1], pixels[:, 0]]
    return pred_pts, gt_pts, face_flags


def mesh_points(pred_mesh, gt_mesh):
    """Nearest-point correspondences from predicted to ground-truth mesh
    vertices (for mesh-against-mesh evaluation)."""
    from scipy.spatial import cKDTree
    tree = cKDTree(np.asarray(gt_mesh.vertices))
    _, idx = tree.query(np.asarray(pred_mesh.vertices))
    return np.asarray(pred_mesh.vertices), np.asarray(gt_mesh.vertices)[idx]
