"""Head pose manipulation: rigid transform of the assembled head in camera
space, joint z-buffered reprojection over the background plate, hole-mask
computation, and harmonic hole filling.

The hole mask M is the vacated part of the source head region (pixels that
showed the head before the move and show nothing afterwards); disocclusions
inside the new coverage are resolved by the z-buffer.  Hole filling is an
explicit diffusion stand-in for learned refinement: it extends boundary
colors harmonically and marks nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geometry import Camera, Pose, TriMesh3D, quat_to_matrix
from .render import RasterOutput, compute_vertex_normals, rasterize, shade, _safe_unit


class HeadBehindCameraError(ValueError):
    """Raised when the transformed head lies entirely behind the camera."""


@dataclass
class PoseDelta:
    """Camera-frame pose displacement: Z-Y-X intrinsic Euler angles in
    degrees (roll about Z, yaw about Y, pitch about X) and a translation in
    mm.  Rotation pivots about the stored head center."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def rotation(self) -> np.ndarray:
        cz, sz = np.cos(np.radians(self.roll)), np.sin(np.radians(self.roll))
        cy, sy = np.cos(np.radians(self.yaw)), np.sin(np.radians(self.yaw))
        cx, sx = np.cos(np.radians(self.pitch)), np.sin(np.radians(self.pitch))
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        return rz @ ry @ rx

    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz], dtype=np.float64)


@dataclass
class HeadAssets:
    """Everything needed to re-render one head: the fitted face mesh (camera
    frame, albedo colors) with its lighting, the hair/ear mesh with carried
    vertex colors, the background plate, the source head mask, the source
    pose and camera, and the rotation pivot (head center, camera frame)."""

    face_mesh: TriMesh3D          # colors = albedo (shaded at render time)
    gamma: np.ndarray
    hair_mesh: TriMesh3D | None   # colors = final vertex colors
    plate: np.ndarray
    head_mask: np.ndarray
    source_pose: Pose
    camera: Camera
    head_center: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.head_mask = np.asarray(self.head_mask, dtype=bool)
        self.head_center = np.asarray(self.head_center, dtype=np.float64)


def camera_frame_transform(assets: HeadAssets, delta: PoseDelta | None = None,
                           target_pose: Pose | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rigid camera-frame map (R, t) the head undergoes: from a pose delta
    (rotation about the head center) or an absolute target pose."""
    if (delta is None) == (target_pose is None):
        raise ValueError("give exactly one of delta or target_pose")
    if delta is not None:
        rot = delta.rotation()
        c = assets.head_center
        t = c - rot @ c + delta.translation()
        return rot, t
    src = assets.source_pose
    rot = target_pose.rotation_matrix() @ src.rotation_matrix().T
    t = target_pose.translation - rot @ src.translation
    return rot, t


def manipulate_pose(assets: HeadAssets, delta: PoseDelta | None = None,
                    target_pose: Pose | None = None
                    ) -> tuple[np.ndarray, np.ndarray, RasterOutput]:
    """Rigidly transform face and hair, re-render jointly over the plate.

    Returns (image, hole mask M, raster buffers of the new head coverage).
    The face is re-shaded under the unchanged lighting with its transformed
    normals; the hair carries its vertex colors.  M = source head region
    minus the new coverage.
    """
    rot, t = camera_frame_transform(assets, delta, target_pose)

    face = assets.face_mesh
    face_verts = face.vertices @ rot.T + t
    normals = compute_vertex_normals(face_verts, face.triangles)
    face_colors = shade(face.colors, _safe_unit(normals), assets.gamma)

    verts = [face_verts]
    tris = [np.asarray(face.triangles, dtype=np.int64)]
    colors = [face_colors]
    if assets.hair_mesh is not None and len(assets.hair_mesh.vertices):
        hair_verts = assets.hair_mesh.vertices @ rot.T + t
        verts.append(hair_verts)
        tris.append(np.asarray(assets.hair_mesh.triangles, dtype=np.int64) + len(face_verts))
        colors.append(np.asarray(assets.hair_mesh.colors, dtype=np.float64))
    all_verts = np.concatenate(verts)
    if not (all_verts[:, 2] > 0).any():
        raise HeadBehindCameraError("transformed head is entirely behind the camera")

    mesh = TriMesh3D(vertices=all_verts, triangles=np.concatenate(tris),
                     colors=np.concatenate(colors))
    out = rasterize(mesh, assets.camera)

    image = np.asarray(assets.plate, dtype=np.float64).copy()
    image[out.mask] = out.color[out.mask]
    hole = assets.head_mask & ~out.mask
    return image, hole, out


def _extend_region(image: np.ndarray, depth: np.ndarray, region: np.ndarray):
    """Dilate the region by one pixel, replicating depth and color from the
    nearest in-region pixel.  Keeps the rasterized mesh silhouette covering
    the full region (boundary pixel centers are mesh boundary vertices and
    would otherwise lose a one-pixel rim)."""
    from scipy.ndimage import binary_dilation, distance_transform_edt

    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    extended = binary_dilation(region, structure=cross)
    _, (src_y, src_x) = distance_transform_edt(~region, return_indices=True)
    depth_ext = depth.copy()
    image_ext = np.asarray(image, dtype=np.float64).copy()
    ring = extended & ~region
    depth_ext[ring] = depth[src_y[ring], src_x[ring]]
    image_ext[ring] = image_ext[src_y[ring], src_x[ring]]
    return image_ext, depth_ext, extended


def build_assets(model, coeffs, pose: Pose, gamma: np.ndarray, depth: np.ndarray,
                 masks, image: np.ndarray, camera: Camera) -> HeadAssets:
    """Assemble a manipulation bundle from a fitted (or ground-truth) scene:
    the posed face mesh with albedo colors, the hair/ear mesh lifted from the
    depth map over H (extended by a one-pixel replicated rim so coverage
    survives re-rasterization), the image as the plate, and the head center
    as the mean of the posed face vertices."""
    from .geometry import build_hair_mesh, compute_hair_region
    from .model import evaluate_shape, evaluate_texture

    face_verts = np.asarray(evaluate_shape(model, coeffs.alpha, coeffs.beta))
    face_verts = face_verts @ pose.rotation_matrix().T + pose.translation
    face_mesh = TriMesh3D(vertices=face_verts,
                          triangles=model.triangles.astype(np.int64),
                          colors=evaluate_texture(model, coeffs.delta))
    hair_region = masks.H if masks.H is not None else compute_hair_region(masks)
    hair_region = hair_region & np.isfinite(depth)
    if hair_region.any():
        image_ext, depth_ext, extended = _extend_region(image, depth, hair_region)
        hair = build_hair_mesh(image_ext, depth_ext, extended, camera)
    else:
        hair = None
    return HeadAssets(
        face_mesh=face_mesh,
        gamma=np.asarray(gamma, dtype=np.float64),
        hair_mesh=hair,
        plate=np.asarray(image, dtype=np.float64),
        head_mask=masks.S,
        source_pose=pose,
        camera=camera,
        head_center=face_verts.mean(axis=0),
    )


def fill_holes(image: np.ndarray, hole_mask: np.ndarray) -> np.ndarray:
    """Replace hole pixels with the harmonic extension of their boundary
    colors; all other pixels are returned bit-identical."""
    mask = np.asarray(hole_mask, dtype=bool)
    img = np.asarray(image, dtype=np.float64)
    if not mask.any():
        return img.copy()
    if mask.all():
        raise ValueError("hole mask covers the entire image; no boundary to extend")

    h, w = mask.shape
    iy, ix = np.nonzero(mask)
    n = len(ix)
    index = -np.ones((h, w), dtype=np.int64)
    index[iy, ix] = np.arange(n)

    diag = np.zeros(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, img.shape[2] if img.ndim == 3 else 1))
    flat = img if img.ndim == 3 else img[..., None]
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = iy + dy, ix + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        in_hole = np.zeros(n, dtype=bool)
        in_hole[inside] = mask[ny[inside], nx[inside]]
        known = inside & ~in_hole
        diag += inside
        rows.extend(np.nonzero(in_hole)[0])
        cols.extend(index[ny[in_hole], nx[in_hole]])
        vals.extend(np.full(int(in_hole.sum()), -1.0))
        rhs[known] += flat[ny[known], nx[known]]

    mat = sp.coo_matrix(
        (np.concatenate([diag, np.asarray(vals)]),
         (np.concatenate([np.arange(n), np.asarray(rows)]),
          np.concatenate([np.arange(n), np.asarray(cols, dtype=np.int64)]))),
        shape=(n, n)).tocsr()
    sol = spsolve(mat, rhs)
    if sol.ndim == 1:
        sol = sol[:, None]

    out = img.copy()
    if img.ndim == 3:
        out[iy, ix] = sol
    else:
        out[iy, ix] = sol[:, 0]
    return out
