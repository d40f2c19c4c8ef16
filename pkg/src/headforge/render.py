"""Software rendering: spherical-harmonics Lambertian shading, z-buffered
rasterization with perspective-correct interpolation, face rendering, and
mesh-based cross-view warping.

Images are (h, w, 3) arrays with rgb in [0, 1]; depth buffers are (h, w)
float64 in mm with +inf (rasterizer) or NaN (depth maps) marking empty
pixels.  Lighting uses a 9-vector of real spherical-harmonics coefficients
applied identically to the three color channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Camera, Pose, TriMesh3D, apply_pose, build_hair_mesh, project, relative_pose
from .model import MorphableModel, evaluate_shape, evaluate_texture

SH_AMBIENT = 2.0 * np.sqrt(np.pi)  # gamma[0] value that reproduces albedo exactly

# Real SH constants, bands 0-2, in the order
# (1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2).
_C0 = 0.5 * np.sqrt(1.0 / np.pi)
_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_C2 = np.array([
    0.5 * np.sqrt(15.0 / np.pi),    # xy
    0.5 * np.sqrt(15.0 / np.pi),    # yz
    0.25 * np.sqrt(5.0 / np.pi),    # 3z^2 - 1
    0.5 * np.sqrt(15.0 / np.pi),    # xz
    0.25 * np.sqrt(15.0 / np.pi),   # x^2 - y^2
])


@dataclass
class RasterOutput:
    """Buffers from one rasterization pass.

    Covered pixels carry the owning triangle id and perspective-correct
    barycentric weights (sum 1); uncovered pixels hold tri_id -1, +inf depth
    and zero weights.  The color buffer is only filled when vertex colors
    were supplied.
    """

    color: np.ndarray      # (h, w, 3) float64
    depth: np.ndarray      # (h, w) float64, +inf sentinel
    mask: np.ndarray       # (h, w) bool coverage
    tri_id: np.ndarray     # (h, w) int32, -1 sentinel
    bary: np.ndarray       # (h, w, 3) float64

    def depth_map(self) -> np.ndarray:
        """Depth buffer with NaN (the depth-map convention) where uncovered."""
        d = self.depth.copy()
        d[~self.mask] = np.nan
        return d


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Real SH basis values, bands 0-2, for unit normals (..., 3) -> (..., 9)."""
    n = np.asarray(normals, dtype=np.float64)
    norms = np.linalg.norm(n, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise ValueError("normals must be unit length")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    out = np.empty(n.shape[:-1] + (9,), dtype=np.float64)
    out[..., 0] = _C0
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    out[..., 4] = _C2[0] * x * y
    out[..., 5] = _C2[1] * y * z
    out[..., 6] = _C2[2] * (3.0 * z * z - 1.0)
    out[..., 7] = _C2[3] * x * z
    out[..., 8] = _C2[4] * (x * x - y * y)
    return out


def shade(albedo: np.ndarray, normals: np.ndarray, gamma: np.ndarray,
          clamp: bool = True) -> np.ndarray:
    """Lambertian SH shading: rgb = albedo * (gamma . sh_basis(n)).

    Clamped to [0, 1] on output by default; pass clamp=False for the raw
    (exactly linear) values.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (9,):
        raise ValueError("gamma must be a 9-vector")
    irradiance = sh_basis(normals) @ gamma
    rgb = np.asarray(albedo, dtype=np.float64) * irradiance[..., None]
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized per vertex.

    Isolated vertices (or vertices whose incident faces cancel) get a zero
    normal rather than NaN; callers that shade must treat those as unlit.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    normals = np.zeros_like(verts)
    if len(tris):
        e1 = verts[tris[:, 1]] - verts[tris[:, 0]]
        e2 = verts[tris[:, 2]] - verts[tris[:, 0]]
        face_n = np.cross(e1, e2)  # magnitude = 2 * area, weights by area
        for k in range(3):
            np.add.at(normals, tris[:, k], face_n)
    lengths = np.linalg.norm(normals, axis=1)
    nonzero = lengths > 1e-12
    normals[nonzero] /= lengths[nonzero, None]
    return normals


def rasterize(mesh: TriMesh3D, camera: Camera,
              attributes: np.ndarray | None = None) -> RasterOutput:
    """Z-buffered, perspective-correct rasterization at pixel centers.

    ``attributes`` defaults to the mesh's vertex colors.  Triangles touching
    a vertex at or behind the camera plane are skipped; there is no backface
    culling.
    """
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    uv, z, _ = project(verts, camera)
    uv = np.nan_to_num(uv, nan=0.0)  # invalid vertices are masked out per-triangle in the kernel
    depth, tri_id, bary = kernels.raster_buffers(
        uv, z, np.asarray(mesh.triangles, dtype=np.int64), camera.width, camera.height)
    mask = tri_id >= 0

    if attributes is None:
        attributes = mesh.colors
    color = np.zeros((camera.height, camera.width, 3), dtype=np.float64)
    if attributes is not None and mask.any():
        color[mask] = interpolate_attribute(
            np.asarray(attributes, dtype=np.float64), mesh.triangles, tri_id, bary, mask)
    return RasterOutput(color=color, depth=depth, mask=mask, tri_id=tri_id, bary=bary)


def interpolate_attribute(attr: np.ndarray, triangles: np.ndarray,
                          tri_id: np.ndarray, bary: np.ndarray,
                          mask: np.ndarray) -> np.ndarray:
    """Interpolate a per-vertex attribute at covered pixels -> (n_covered, k)."""
    tris = np.asarray(triangles, dtype=np.int64)
    ids = tri_id[mask]
    w = bary[mask]
    corner = attr[tris[ids]]  # (p, 3, k...)
    return np.einsum("pc,pc...->p...", w, corner)


def render_face(model: MorphableModel, coeffs, pose: Pose, gamma: np.ndarray,
                camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render the parametric face: returns (image, coverage mask F, face depth map).

    Shading normals live in the camera frame (computed after posing), so a
    fixed gamma keeps the light rig attached to the camera.  The depth map
    uses NaN outside coverage.
    """
    verts = apply_pose(evaluate_shape(model, coeffs.alpha, coeffs.beta), pose)
    albedo = evaluate_texture(model, coeffs.delta)
    normals = compute_vertex_normals(verts, model.triangles)
    colors = shade(albedo, _safe_unit(normals), gamma)
    mesh = TriMesh3D(vertices=verts, triangles=model.triangles.astype(np.int64),
                     colors=colors)
    out = rasterize(mesh, camera)
    return out.color, out.mask, out.depth_map()


def _safe_unit(normals: np.ndarray) -> np.ndarray:
    """Replace zero normals (isolated vertices) with an arbitrary unit vector."""
    n = normals.copy()
    zero = np.linalg.norm(n, axis=-1) < 1e-12
    n[zero] = (0.0, 0.0, 1.0)
    return n


def warp_image(image: np.ndarray, depth: np.ndarray, region: np.ndarray,
               pose_src: Pose, pose_dst: Pose, camera: Camera,
               background: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, RasterOutput]:
    """Mesh-based forward warp of ``region`` into the destination camera.

    Builds the region mesh by inverse projection, maps it through the
    relative pose and rasterizes it carrying the source colors.  Returns the
    warped image (over ``background`` when given, else black), the coverage
    mask, and the raw raster buffers (whose depth enables chained warps).
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty warp region")
    mesh = build_hair_mesh(image, depth, region, camera)
    mesh.vertices = apply_pose(mesh.vertices, relative_pose(pose_src, pose_dst))
    out = rasterize(mesh, camera)
    warped = np.zeros_like(out.color) if background is None else \
        np.asarray(background, dtype=np.float64).copy()
    warped[out.mask] = out.color[out.mask]
    return warped, out.mask, out


def sample_bilinear(image: np.ndarray, xy: np.ndarray, oob: str = "zero"
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear sample of a (h, w, c) or (h, w) image at grid coordinates.

    ``xy`` is (n, 2) in the array-index convention: integer (x, y) lands
    exactly on ``image[y, x]``.  Returns (values (n, c), gradient (n, 2, c)
    as the analytic d/dx and d/dy of the bilinear surface, valid (n,) flags
    for samples inside [0, w-1] x [0, h-1]).

    ``oob="zero"`` zeroes out-of-bounds rows (callers drop them via the
    flags); ``oob="clamp"`` extends the image constantly beyond its bounds,
    keeping the sampled surface continuous across the border.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, c = img.shape
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & np.isfinite(x) & np.isfinite(y)

    xc = np.clip(np.nan_to_num(x, nan=0.0), 0.0, w - 1.0)
    yc = np.clip(np.nan_to_num(y, nan=0.0), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.int64) if w > 1 else np.zeros(len(xc), np.int64)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.int64) if h > 1 else np.zeros(len(yc), np.int64)
    fx = (xc - x0)[:, None]
    fy = (yc - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    i00 = img[y0, x0]
    i01 = img[y0, x1]
    i10 = img[y1, x0]
    i11 = img[y1, x1]

    values = (i00 * (1 - fx) * (1 - fy) + i01 * fx * (1 - fy)
              + i10 * (1 - fx) * fy + i11 * fx * fy)
    grad = np.empty((len(xy), 2, c), dtype=np.float64)
    grad[:, 0] = (i01 - i00) * (1 - fy) + (i11 - i10) * fy
    grad[:, 1] = (i10 - i00) * (1 - fx) + (i11 - i01) * fx

    if oob == "zero":
        values[~valid] = 0.0
        grad[~valid] = 0.0
    elif oob == "clamp":
        grad[:, 0][xc != x] = 0.0  # constant extension beyond the border
        grad[:, 1][yc != y] = 0.0
    else:
        raise ValueError(f"unknown oob mode {oob!r}")
    if squeeze:
        return values[:, 0], grad[:, :, 0], valid
    return values, grad, valid
