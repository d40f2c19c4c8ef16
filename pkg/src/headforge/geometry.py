"""Pose and camera mathematics, projection, region algebra, grid
triangulation and rigid alignment.

Camera convention (used everywhere in the package): right-handed, the camera
sits at the origin looking along +Z, image +X right and +Y down.  A pixel
(ix, iy) covers the unit square [ix, ix+1) x [iy, iy+1) in continuous image
coordinates; its center is (ix + 0.5, iy + 0.5).  Depth is the camera-space Z
coordinate in millimeters, positive in front of the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-9
DEFAULT_FOCAL_256 = 1160.0  # px, moderate perspective at arm's-length head distance


class DegenerateGeometryError(ValueError):
    """Raised for inputs without enough geometric structure (e.g. collinear points)."""


class UndefinedDepthError(ValueError):
    """Raised when an operation touches undefined (NaN) depth pixels."""


def _unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("zero quaternion")
    return q / norm


@dataclass
class Pose:
    """Rigid transform x -> R(quaternion) @ x + translation, quaternion (w, x, y, z)."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.quaternion = _unit_quat(self.quaternion)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        assert abs(np.linalg.norm(self.quaternion) - 1.0) < QUAT_TOL

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle_rad
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return Pose(q, np.asarray(translation, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.quaternion)
        r_inv = quat_to_matrix(q_inv)
        return Pose(q_inv, -(r_inv @ self.translation))

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying ``other`` first, then ``self``."""
        q = quat_multiply(self.quaternion, other.quaternion)
        t = self.rotation_matrix() @ other.translation + self.translation
        return Pose(q, t)


@dataclass
class Camera:
    """Pinhole intrinsics; u = focal*X/Z + cx, v = focal*Y/Z + cy."""

    focal: float
    principal_point: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise ValueError("principal point outside image bounds")

    @staticmethod
    def default(width: int = 256, height: int | None = None) -> "Camera":
        height = width if height is None else height
        focal = DEFAULT_FOCAL_256 * width / 256.0
        return Camera(focal, np.array([width / 2.0, height / 2.0]), width, height)


@dataclass
class RegionMasks:
    """Binary image-sized masks: head S, segmented face S_f, segmented hair
    S_h, rendered face coverage F, and the derived hair/ear region H."""

    S: np.ndarray
    S_f: np.ndarray
    S_h: np.ndarray
    F: np.ndarray
    H: np.ndarray | None = None

    def __post_init__(self):
        for name in ("S", "S_f", "S_h", "F"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        if self.H is not None:
            self.H = np.asarray(self.H, dtype=bool)

    def validate(self) -> None:
        if np.any(self.S_f & ~self.S):
            raise ValueError("segmented face mask must lie inside the head mask")
        if np.any(self.S_h & ~self.S):
            raise ValueError("segmented hair mask must lie inside the head mask")
        if self.H is not None:
            if np.any(self.H & ~self.S):
                raise ValueError("hair/ear region must lie inside the head mask")
            if np.any(self.H != (self.S & ~(self.S_f & self.F))):
                raise ValueError("hair/ear region inconsistent with its definition")


@dataclass
class TriMesh2D:
    vertices: np.ndarray          # (n, 2) float64 continuous pixel coords
    triangles: np.ndarray         # (m, 3) int64
    pixels: np.ndarray | None = None  # (n, 2) int64 source (ix, iy), if grid-born


@dataclass
class TriMesh3D:
    vertices: np.ndarray          # (n, 3) float64 mm
    triangles: np.ndarray         # (m, 3) int64
    colors: np.ndarray | None = None  # (n, 3) rgb in [0, 1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")


# ---------------------------------------------------------------------------
# Quaternions

def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = _unit_quat(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return _unit_quat(q)


# ---------------------------------------------------------------------------
# Pose and projection operations

def apply_pose(points: np.ndarray, pose: Pose) -> np.ndarray:
    """R @ x + t for each point; points (..., 3)."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation_matrix().T + pose.translation


def relative_pose(pose1: Pose, pose2: Pose) -> Pose:
    """Map camera-1 coordinates into camera-2 coordinates.

    Composes to (R2 R1^-1, t2 - R2 R1^-1 t1), so chaining through a shared
    world point is exact: rel(apply(p1, x)) == apply(p2, x).
    """
    return pose2.compose(pose1.inverse())


def project(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pixel coords (n, 2), depth (n,), and validity (Z > 0) flags."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * pts[..., 0] / z + camera.principal_point[0]
        v = camera.focal * pts[..., 1] / z + camera.principal_point[1]
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = np.nan
    return uv, z.copy(), valid


def unproject(depth: np.ndarray, mask: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """3D camera-space point per masked pixel center.

    Returns (points (m, 3), pixels (m, 2) as (ix, iy)); masked pixels with
    undefined depth raise, listing the offenders.
    """
    mask = np.asarray(mask, dtype=bool)
    d = np.asarray(depth, dtype=np.float64)
    iy, ix = np.nonzero(mask)
    z = d[iy, ix]
    bad = ~np.isfinite(z)
    if np.any(bad):
        coords = list(zip(ix[bad][:10].tolist(), iy[bad][:10].tolist()))
        raise UndefinedDepthError(
            f"{bad.sum()} masked pixels have undefined depth, first offenders {coords}")
    cx, cy = camera.principal_point
    x = (ix + 0.5 - cx) * z / camera.focal
    y = (iy + 0.5 - cy) * z / camera.focal
    return np.stack([x, y, z], axis=1), np.stack([ix, iy], axis=1)


def pixel_rays(pixels: np.ndarray, camera: Camera) -> np.ndarray:
    """Unit-depth ray (h_x, h_y, 1) through each pixel center; pixels (m, 2) int."""
    cx, cy = camera.principal_point
    hx = (pixels[:, 0] + 0.5 - cx) / camera.focal
    hy = (pixels[:, 1] + 0.5 - cy) / camera.focal
    return np.stack([hx, hy, np.ones(len(pixels))], axis=1)


def triangulate_region(mask: np.ndarray) -> TriMesh2D:
    """Triangulate in-mask pixel centers; every fully-covered 2x2 quad yields
    two triangles split along its top-left -> bottom-right diagonal."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    iy, ix = np.nonzero(mask)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[iy, ix] = np.arange(len(ix))
    vertices = np.stack([ix + 0.5, iy + 0.5], axis=1)

    quad = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]
    qy, qx = np.nonzero(quad)
    tl = index[qy, qx]
    tr = index[qy, qx + 1]
    bl = index[qy + 1, qx]
    br = index[qy + 1, qx + 1]
    # Camera-facing winding (+Y down, +Z away): (tl, br, tr) and (tl, bl, br).
    tris = np.concatenate([np.stack([tl, br, tr], axis=1),
                           np.stack([tl, bl, br], axis=1)], axis=0) if len(qx) else \
        np.zeros((0, 3), dtype=np.int64)
    return TriMesh2D(vertices=vertices, triangles=tris,
                     pixels=np.stack([ix, iy], axis=1))


def compute_hair_region(masks: RegionMasks) -> np.ndarray:
    """H = S - (S_f intersect F); stored back into the mask set."""
    h = masks.S & ~(masks.S_f & masks.F)
    masks.H = h
    return h


DEPTH_DISCONTINUITY_FRACTION = 0.03  # of the region's median depth


def build_hair_mesh(image: np.ndarray, depth: np.ndarray, region: np.ndarray,
                    camera: Camera,
                    discontinuity_fraction: float = DEPTH_DISCONTINUITY_FRACTION) -> TriMesh3D:
    """Lift the triangulated region by unprojection; vertex colors come from
    the image at pixel centers.  Triangles spanning a depth discontinuity
    (vertex depth range above the threshold) are dropped, then unreferenced
    vertices are compacted away."""
    mesh2d = triangulate_region(region)
    points, pixels = unproject(depth, region, camera)
    colors = np.asarray(image, dtype=np.float64)[pixels[:, 1], pixels[:, 0]]

    tris = mesh2d.triangles
    if len(tris):
        z = points[:, 2][tris]
        threshold = discontinuity_fraction * np.median(points[:, 2])
        keep = (z.max(axis=1) - z.min(axis=1)) <= threshold
        tris = tris[keep]

    referenced = np.zeros(len(points), dtype=bool)
    referenced[tris.ravel()] = True
    remap = -np.ones(len(points), dtype=np.int64)
    remap[referenced] = np.arange(referenced.sum())
    mesh = TriMesh3D(vertices=points[referenced], triangles=remap[tris],
                     colors=colors[referenced])
    mesh.validate()
    return mesh


def rigid_align(source: np.ndarray, target: np.ndarray) -> tuple[Pose, float]:
    """Least-squares rigid registration (rotation + translation, no scale)
    of source onto target; returns the pose and the aligned mean distance."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must be matching (n, 3) arrays")
    if len(src) < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")

    src_c = src - src.mean(axis=0)
    tgt_c = tgt - tgt.mean(axis=0)
    cov = src_c.T @ tgt_c
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise DegenerateGeometryError("point set is degenerate (collinear or coincident)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = tgt.mean(axis=0) - rot @ src.mean(axis=0)
    pose = Pose(matrix_to_quat(rot), t)
    residual = float(np.linalg.norm(apply_pose(src, pose) - tgt, axis=1).mean())
    return pose, residual
