"""Affine head model: mean shape/texture plus linear identity, expression and
texture bases, evaluated as

    shape(alpha, beta) = mean_shape + basis_id @ alpha + basis_exp @ beta
    texture(delta)     = mean_texture + basis_tex @ delta

Shapes are millimeter coordinates flattened as (x0, y0, z0, x1, ...); textures
are rgb in [0, 1] flattened the same way.  Real PCA model data is licensed and
cannot ship with the repo, so ``synthesize_model`` builds a deterministic
stand-in: a subdivided ellipsoid head with a nose bump and smooth random
low-frequency deformation bases.  Conversion of licensed data is a matter of
filling the same container (see ``save_model`` for the file layout).

Model-space conventions: +X to the anatomical left, +Y down, the face looks
along -Z (toward the camera under an identity pose with positive Z
translation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"P3DM1"


class ModelFormatError(ValueError):
    """Raised when a model container fails validation on load."""


class DimensionError(ValueError):
    """Raised when coefficient vectors do not match the model's bases."""


@dataclass(frozen=True)
class MorphableModel:
    """Immutable affine model; safe to share across concurrent fits."""

    triangles: np.ndarray       # (n_tri, 3) uint32
    mean_shape: np.ndarray      # (3n,) float32, mm
    mean_texture: np.ndarray    # (3n,) float32, rgb in [0, 1]
    basis_id: np.ndarray        # (3n, k_id) float32, column-major
    basis_exp: np.ndarray       # (3n, k_exp) float32
    basis_tex: np.ndarray       # (3n, k_tex) float32
    coeff_scales_id: np.ndarray   # (k_id,) > 0
    coeff_scales_exp: np.ndarray  # (k_exp,) > 0
    coeff_scales_tex: np.ndarray  # (k_tex,) > 0
    landmark_indices: np.ndarray  # (n_landmarks,) uint32, distinct

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def k_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def k_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def k_tex(self) -> int:
        return self.basis_tex.shape[1]

    def validate(self) -> None:
        n = self.n_vertices
        if self.mean_shape.shape != (3 * n,):
            raise ModelFormatError("mean_shape length is not a multiple of 3")
        if self.mean_texture.shape != (3 * n,):
            raise ModelFormatError("mean_texture length does not match mean_shape")
        for name, basis in (("basis_id", self.basis_id),
                            ("basis_exp", self.basis_exp),
                            ("basis_tex", self.basis_tex)):
            if basis.ndim != 2 or basis.shape[0] != 3 * n:
                raise ModelFormatError(f"{name} row count must be 3*n_vertices")
        for name, scales, k in (("coeff_scales_id", self.coeff_scales_id, self.k_id),
                                ("coeff_scales_exp", self.coeff_scales_exp, self.k_exp),
                                ("coeff_scales_tex", self.coeff_scales_tex, self.k_tex)):
            if scales.shape != (k,):
                raise ModelFormatError(f"{name} length must match basis width")
            if not np.all(scales > 0):
                raise ModelFormatError(f"{name} must be strictly positive")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ModelFormatError("triangles must be (n_tri, 3)")
        if self.triangles.size and self.triangles.max() >= n:
            raise ModelFormatError("triangle index out of range")
        lm = self.landmark_indices
        if lm.size != np.unique(lm).size:
            raise ModelFormatError("landmark indices must be distinct")
        if lm.size and lm.max() >= n:
            raise ModelFormatError("landmark index out of range")


@dataclass
class FaceCoefficients:
    """Coefficient block for one head instance, bound to a model's widths."""

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray

    @staticmethod
    def zeros(model: MorphableModel) -> "FaceCoefficients":
        return FaceCoefficients(
            alpha=np.zeros(model.k_id),
            beta=np.zeros(model.k_exp),
            delta=np.zeros(model.k_tex),
        )

    def copy(self) -> "FaceCoefficients":
        return FaceCoefficients(self.alpha.copy(), self.beta.copy(), self.delta.copy())


def _check_len(name: str, vec: np.ndarray, k: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (k,):
        raise DimensionError(f"{name} has length {vec.shape}, model expects ({k},)")
    return vec


def evaluate_shape(model: MorphableModel, alpha, beta) -> np.ndarray:
    """Vertex positions (n, 3) in mm for the given identity/expression coefficients."""
    alpha = _check_len("alpha", alpha, model.k_id)
    beta = _check_len("beta", beta, model.k_exp)
    flat = (model.mean_shape.astype(np.float64)
            + model.basis_id.astype(np.float64) @ alpha
            + model.basis_exp.astype(np.float64) @ beta)
    return flat.reshape(-1, 3)


def evaluate_texture(model: MorphableModel, delta) -> np.ndarray:
    """Per-vertex rgb (n, 3); values are not clamped here, only at render time."""
    delta = _check_len("delta", delta, model.k_tex)
    flat = model.mean_texture.astype(np.float64) + model.basis_tex.astype(np.float64) @ delta
    return flat.reshape(-1, 3)


# ---------------------------------------------------------------------------
# Synthetic model generation

def icosphere(n_subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere; vertex count is 10 * 4**n_subdiv + 2."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(n_subdiv):
        edge_mid: dict[tuple[int, int], int] = {}
        new_verts = [v for v in verts]

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = edge_mid.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                idx = len(new_verts)
                new_verts.append(m)
                edge_mid[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(new_verts)
        faces = np.array(new_faces, dtype=np.int64)

    return verts, faces


# Head template proportions (mm).  Semi-axes chosen for an adult head; the
# nose bump protrudes toward -Z so the face looks at the camera under an
# identity pose.
_HEAD_SEMI_AXES = np.array([80.0, 100.0, 85.0])
_NOSE_DIR = np.array([0.0, 0.12, -1.0]) / np.linalg.norm([0.0, 0.12, -1.0])
_NOSE_HEIGHT_MM = 22.0
_NOSE_WIDTH = 0.28  # angular falloff scale on the unit sphere

# Probe directions whose extremal template vertices become landmarks
# (nose tip, chin, forehead, cheeks, jaw corners, brow points).
_LANDMARK_PROBES = np.array([
    [0.0, 0.12, -1.0],    # nose tip
    [0.0, 1.0, -0.45],    # chin
    [0.0, -1.0, -0.40],   # forehead
    [1.0, 0.0, -0.35],    # left cheek
    [-1.0, 0.0, -0.35],   # right cheek
    [0.7, 0.7, -0.5],     # left jaw
    [-0.7, 0.7, -0.5],    # right jaw
    [0.45, -0.45, -0.8],  # left brow
    [-0.45, -0.45, -0.8], # right brow
    [0.0, 0.55, -0.9],    # upper lip area
])


def _template(n_subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    unit, faces = icosphere(n_subdiv)
    bump = np.exp(-((1.0 - unit @ _NOSE_DIR) / _NOSE_WIDTH) ** 2)
    verts = unit * _HEAD_SEMI_AXES + unit * bump[:, None] * _NOSE_HEIGHT_MM
    return verts, faces


def _smooth_field(rng: np.random.Generator, verts: np.ndarray, n_waves: int = 4) -> np.ndarray:
    """Random low-frequency displacement field over the template (n, 3)."""
    field = np.zeros_like(verts)
    for _ in range(n_waves):
        freq = rng.uniform(0.008, 0.03, size=3)        # cycles per mm
        phase = rng.uniform(0, 2 * np.pi, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        amp = rng.normal(size=3)
        arg = 2 * np.pi * (verts * freq).sum(axis=1)[:, None] + phase
        field += np.sin(arg) * amp * direction
    return field


def synthesize_model(seed: int, n_subdiv: int = 3, k_id: int = 16, k_exp: int = 8,
                     k_tex: int = 16, n_landmarks: int = 10) -> MorphableModel:
    """Deterministic stand-in model: ellipsoid head, nose bump, smooth bases.

    Basis columns are orthonormalized, so coefficient scales are 1 and the
    physical magnitude of a deformation lives in the coefficients.
    """
    if n_subdiv < 1:
        raise ValueError("n_subdiv must be >= 1")
    if min(k_id, k_exp, k_tex) < 1:
        raise ValueError("basis widths must be >= 1")
    if not 1 <= n_landmarks <= len(_LANDMARK_PROBES):
        raise ValueError(f"n_landmarks must be in [1, {len(_LANDMARK_PROBES)}]")

    rng = np.random.default_rng(seed)
    verts, faces = _template(n_subdiv)
    n = len(verts)

    def make_basis(k: int) -> np.ndarray:
        cols = np.stack([_smooth_field(rng, verts).ravel() for _ in range(k)], axis=1)
        q, r = np.linalg.qr(cols)
        # Fix column signs so the factorization is unique and seed-stable.
        q = q * np.sign(np.diag(r))
        return q

    basis_id = make_basis(k_id)
    basis_exp = make_basis(k_exp)
    basis_tex = make_basis(k_tex)

    # Skin-like base tone with a smooth seeded tint so texture columns act on
    # a non-constant mean.
    base = np.array([0.72, 0.55, 0.47])
    tint = 0.06 * _smooth_field(rng, verts, n_waves=2)
    mean_texture = np.clip(base + tint, 0.05, 0.95).ravel()

    unit = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    scores = unit @ _LANDMARK_PROBES[:n_landmarks].T / np.linalg.norm(
        _LANDMARK_PROBES[:n_landmarks], axis=1)
    landmark_indices: list[int] = []
    for j in range(n_landmarks):
        order = np.argsort(-scores[:, j])
        pick = next(i for i in order if i not in landmark_indices)
        landmark_indices.append(int(pick))

    model = MorphableModel(
        triangles=faces.astype(np.uint32),
        mean_shape=verts.ravel().astype(np.float32),
        mean_texture=mean_texture.astype(np.float32),
        basis_id=basis_id.astype(np.float32),
        basis_exp=basis_exp.astype(np.float32),
        basis_tex=basis_tex.astype(np.float32),
        coeff_scales_id=np.ones(k_id, dtype=np.float32),
        coeff_scales_exp=np.ones(k_exp, dtype=np.float32),
        coeff_scales_tex=np.ones(k_tex, dtype=np.float32),
        landmark_indices=np.array(landmark_indices, dtype=np.uint32),
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Container format P3DM1
#
# magic (5 bytes) | u32 x 6 header: n_vertices, n_triangles, k_id, k_exp,
# k_tex, n_landmarks | payload arrays in declaration order, little-endian:
# triangles u32, mean_shape f32, mean_texture f32, basis_id f32 (column-major),
# basis_exp f32, basis_tex f32, coeff_scales_id/exp/tex f32, landmarks u32.

def save_model(model: MorphableModel, path) -> None:
    model.validate()
    n = model.n_vertices
    header = struct.pack("<6I", n, len(model.triangles), model.k_id,
                         model.k_exp, model.k_tex, len(model.landmark_indices))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(model.triangles, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(model.mean_shape, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.mean_texture, dtype="<f4").tobytes())
        for basis in (model.basis_id, model.basis_exp, model.basis_tex):
            fh.write(np.asfortranarray(basis, dtype="<f4").tobytes(order="F"))
        for scales in (model.coeff_scales_id, model.coeff_scales_exp, model.coeff_scales_tex):
            fh.write(np.ascontiguousarray(scales, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.landmark_indices, dtype="<u4").tobytes())


def load_model(path) -> MorphableModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise ModelFormatError(f"bad magic {blob[:5]!r}, expected {MAGIC!r}")
    if len(blob) < 5 + 24:
        raise ModelFormatError("truncated header")
    n, n_tri, k_id, k_exp, k_tex, n_lm = struct.unpack_from("<6I", blob, 5)

    expect = 5 + 24 + 4 * (n_tri * 3 + 3 * n * 2 + 3 * n * (k_id + k_exp + k_tex)
                           + k_id + k_exp + k_tex + n_lm)
    if len(blob) != expect:
        raise ModelFormatError(
            f"payload size {len(blob)} does not match header (expected {expect})")

    off = 5 + 24

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    triangles = take(n_tri * 3, "<u4").reshape(n_tri, 3)
    mean_shape = take(3 * n, "<f4")
    mean_texture = take(3 * n, "<f4")
    basis_id = take(3 * n * k_id, "<f4").reshape((3 * n, k_id), order="F")
    basis_exp = take(3 * n * k_exp, "<f4").reshape((3 * n, k_exp), order="F")
    basis_tex = take(3 * n * k_tex, "<f4").reshape((3 * n, k_tex), order="F")
    scales_id = take(k_id, "<f4")
    scales_exp = take(k_exp, "<f4")
    scales_tex = take(k_tex, "<f4")
    landmarks = take(n_lm, "<u4")

    model = MorphableModel(
        triangles=triangles.copy(),
        mean_shape=mean_shape.copy(),
        mean_texture=mean_texture.copy(),
        basis_id=np.asfortranarray(basis_id),
        basis_exp=np.asfortranarray(basis_exp),
        basis_tex=np.asfortranarray(basis_tex),
        coeff_scales_id=scales_id.copy(),
        coeff_scales_exp=scales_exp.copy(),
        coeff_scales_tex=scales_tex.copy(),
        landmark_indices=landmarks.copy(),
    )
    model.validate()
    return model
