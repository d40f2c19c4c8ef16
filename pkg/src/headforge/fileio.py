"""File formats and bundle layouts.

- Images: 8-bit PNG; stored values map linearly to [0, 1] (no gamma
  transform).  Masks: single-channel PNG, 0/255.
- Depth maps: "DPTH1" container; magic, little-endian u32 width/height, then
  row-major little-endian f32 with quiet NaN for undefined pixels.
- Meshes: OBJ with per-vertex rgb appended to each ``v`` line.
- Configuration and metadata: flat ``key=value`` text, one pair per line,
  '#' comments; unknown keys are rejected by the typed readers.
- Landmarks: CSV ``vertex_index,x,y,weight`` with a header line.

Scene bundles and head-asset bundles are directories of these files; see
``save_scene``/``save_assets`` for the exact member names.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

from .geometry import Camera, Pose, RegionMasks, TriMesh3D, compute_hair_region
from .losses import LandmarkSet
from .manipulate import HeadAssets
from .model import FaceCoefficients, MorphableModel, load_model, save_model

DEPTH_MAGIC = b"DPTH1"


class DepthFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Images and masks

def write_png(path, image: np.ndarray, metadata: dict[str, str] | None = None) -> None:
    arr = np.asarray(image, dtype=np.float64)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(data, mode="RGB" if data.ndim == 3 else "L")
    info = None
    if metadata:
        info = PngInfo()
        for k, v in metadata.items():
            info.add_text(k, v)
    pil.save(path, format="PNG", pnginfo=info)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def png_bytes(image: np.ndarray, metadata: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    data = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(data, mode="RGB" if data.ndim == 3 else "L")
    info = None
    if metadata:
        info = PngInfo()
        for k, v in metadata.items():
            info.add_text(k, v)
    pil.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def write_mask(path, mask: np.ndarray) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil.convert("L"))
    return arr >= 128


# ---------------------------------------------------------------------------
# Depth maps

def write_depth(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise DepthFormatError("depth map must be 2D")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<2I", d.shape[1], d.shape[0]))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != DEPTH_MAGIC:
        raise DepthFormatError(f"bad magic {blob[:5]!r}")
    if len(blob) < 13:
        raise DepthFormatError("truncated header")
    w, h = struct.unpack_from("<2I", blob, 5)
    expect = 13 + 4 * w * h
    if len(blob) != expect:
        raise DepthFormatError(f"payload size {len(blob)} does not match header ({expect})")
    return np.frombuffer(blob, dtype="<f4", offset=13).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# Meshes

def write_obj(path, mesh: TriMesh3D) -> None:
    with open(path, "w") as fh:
        colors = mesh.colors if mesh.colors is not None else np.zeros_like(mesh.vertices)
        for v, c in zip(mesh.vertices, colors):
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} "
                     f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> TriMesh3D:
    verts, colors, tris = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                nums = [float(x) for x in parts[1:]]
                verts.append(nums[:3])
                colors.append(nums[3:6] if len(nums) >= 6 else [0.0, 0.0, 0.0])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh3D(vertices=np.array(verts, dtype=np.float64),
                     triangles=np.array(tris, dtype=np.int64).reshape(-1, 3),
                     colors=np.array(colors, dtype=np.float64))


# ---------------------------------------------------------------------------
# key=value text

def write_kv(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        for k, v in mapping.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                v = ",".join(repr(float(x)) for x in np.asarray(v).ravel())
            fh.write(f"{k}={v}\n")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",") if x.strip() != ""])


def pose_to_kv(pose: Pose) -> dict:
    return {"quaternion": pose.quaternion, "translation": pose.translation}


def pose_from_kv(kv: dict[str, str]) -> Pose:
    return Pose(_floats(kv["quaternion"]), _floats(kv["translation"]))


def camera_to_kv(camera: Camera) -> dict:
    return {"focal": camera.focal, "principal_point": camera.principal_point,
            "width": camera.width, "height": camera.height}


def camera_from_kv(kv: dict[str, str]) -> Camera:
    return Camera(float(kv["focal"]), _floats(kv["principal_point"]),
                  int(kv["width"]), int(kv["height"]))


def load_config(path):
    """Flat key=value file -> (LossWeights, FitConfig); unknown keys error."""
    from dataclasses import fields
    from .fit import FitConfig
    from .losses import LossWeights

    kv = read_kv(path)
    weight_names = {f.name for f in fields(LossWeights)}
    config_names = {f.name for f in fields(FitConfig)} - {"weights"}
    weights_kv = {k: float(v) for k, v in kv.items() if k in weight_names}
    config_kv = {}
    unknown = []
    for k, v in kv.items():
        if k in weight_names:
            continue
        if k not in config_names:
            unknown.append(k)
            continue
        if k in ("face_iterations", "depth_iterations", "patience", "seed"):
            config_kv[k] = int(v)
        elif k == "coarse_to_fine":
            config_kv[k] = v.lower() in ("1", "true", "yes")
        else:
            config_kv[k] = float(v)
    if unknown:
        raise KeyError(f"unknown configuration keys: {sorted(unknown)}")
    weights = LossWeights.from_mapping(weights_kv)
    return weights, FitConfig(weights=weights, **config_kv)


# ---------------------------------------------------------------------------
# Landmarks

def write_landmarks(path, landmarks: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex_index", "x", "y", "weight"])
        for i in range(len(landmarks)):
            writer.writerow([int(landmarks.vertex_indices[i]),
                             repr(float(landmarks.positions[i, 0])),
                             repr(float(landmarks.positions[i, 1])),
                             repr(float(landmarks.weights[i]))])


def read_landmarks(path) -> LandmarkSet:
    idx, pos, wts = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            idx.append(int(row["vertex_index"]))
            pos.append([float(row["x"]), float(row["y"])])
            wts.append(float(row["weight"]))
    return LandmarkSet(np.array(idx), np.array(pos), np.array(wts))


# ---------------------------------------------------------------------------
# Scene bundles

def save_scene(bundle, out_dir) -> None:
    """Directory layout: model.p3dm, camera.txt, gamma_gt.txt, coeffs_gt.txt,
    scene.txt, background.png, and per view i in {1, 2}: image{i}.png,
    mask{i}_{S,Sf,Sh,F}.png, depth{i}_gt.dpth, facedepth{i}_gt.dpth,
    pose{i}.txt, landmarks{i}.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(bundle.model, out / "model.p3dm")
    write_kv(out / "camera.txt", camera_to_kv(bundle.camera))
    write_kv(out / "gamma_gt.txt", {"gamma": bundle.gamma})
    write_kv(out / "coeffs_gt.txt", {"alpha": bundle.coeffs.alpha,
                                     "beta": bundle.coeffs.beta,
                                     "delta": bundle.coeffs.delta})
    spec = bundle.spec
    write_kv(out / "scene.txt", {
        "seed": spec.seed, "size": spec.size, "n_subdiv": spec.n_subdiv,
        "k_id": spec.k_id, "k_exp": spec.k_exp, "k_tex": spec.k_tex,
        "coeff_std": spec.coeff_std, "hair_offset_mm": spec.hair_offset_mm,
        "hair_texture_freq": spec.hair_texture_freq,
        "head_distance_mm": spec.head_distance_mm,
        "yaw2_deg": spec.yaw2_deg, "noise": spec.noise})
    write_png(out / "background.png", bundle.background)
    for i, view in enumerate(bundle.views, start=1):
        write_png(out / f"image{i}.png", view.image)
        write_mask(out / f"mask{i}_S.png", view.masks.S)
        write_mask(out / f"mask{i}_Sf.png", view.masks.S_f)
        write_mask(out / f"mask{i}_Sh.png", view.masks.S_h)
        write_mask(out / f"mask{i}_F.png", view.masks.F)
        write_depth(out / f"depth{i}_gt.dpth", view.depth_gt)
        write_depth(out / f"facedepth{i}_gt.dpth", view.face_depth_gt)
        write_kv(out / f"pose{i}.txt", pose_to_kv(view.pose))
        write_landmarks(out / f"landmarks{i}.csv", view.landmarks)


def load_scene_view(scene_dir, index: int):
    """One view back from disk: (image, RegionMasks, depth_gt, face_depth_gt,
    pose, landmarks)."""
    d = Path(scene_dir)
    image = read_png(d / f"image{index}.png")
    masks = RegionMasks(S=read_mask(d / f"mask{index}_S.png"),
                        S_f=read_mask(d / f"mask{index}_Sf.png"),
                        S_h=read_mask(d / f"mask{index}_Sh.png"),
                        F=read_mask(d / f"mask{index}_F.png"))
    compute_hair_region(masks)
    depth = read_depth(d / f"depth{index}_gt.dpth")
    face_depth = read_depth(d / f"facedepth{index}_gt.dpth")
    pose = pose_from_kv(read_kv(d / f"pose{index}.txt"))
    landmarks = read_landmarks(d / f"landmarks{index}.csv")
    return image, masks, depth, face_depth, pose, landmarks


def load_scene_common(scene_dir):
    """(model, camera, gamma, coeffs) from a scene bundle."""
    d = Path(scene_dir)
    model = load_model(d / "model.p3dm")
    camera = camera_from_kv(read_kv(d / "camera.txt"))
    gamma = _floats(read_kv(d / "gamma_gt.txt")["gamma"])
    ckv = read_kv(d / "coeffs_gt.txt")
    coeffs = FaceCoefficients(_floats(ckv["alpha"]), _floats(ckv["beta"]),
                              _floats(ckv["delta"]))
    return model, camera, gamma, coeffs


# ---------------------------------------------------------------------------
# Head-asset bundles

def save_assets(assets: HeadAssets, out_dir) -> None:
    """Directory layout: face_mesh.obj (albedo colors), hair_mesh.obj,
    plate.png, head_mask.png, meta.txt (gamma, camera, source pose, head
    center)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(out / "face_mesh.obj", assets.face_mesh)
    if assets.hair_mesh is not None:
        write_obj(out / "hair_mesh.obj", assets.hair_mesh)
    write_png(out / "plate.png", assets.plate)
    write_mask(out / "head_mask.png", assets.head_mask)
    meta = {"gamma": assets.gamma, "head_center": assets.head_center}
    meta.update({f"pose_{k}": v for k, v in pose_to_kv(assets.source_pose).items()})
    meta.update({f"camera_{k}": v for k, v in camera_to_kv(assets.camera).items()})
    write_kv(out / "meta.txt", meta)


def load_assets(assets_dir) -> HeadAssets:
    d = Path(assets_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"assets bundle not found: {assets_dir}")
    kv = read_kv(d / "meta.txt")
    hair = read_obj(d / "hair_mesh.obj") if (d / "hair_mesh.obj").exists() else None
    return HeadAssets(
        face_mesh=read_obj(d / "face_mesh.obj"),
        gamma=_floats(kv["gamma"]),
        hair_mesh=hair,
        plate=read_png(d / "plate.png"),
        head_mask=read_mask(d / "head_mask.png"),
        source_pose=Pose(_floats(kv["pose_quaternion"]), _floats(kv["pose_translation"])),
        camera=Camera(float(kv["camera_focal"]), _floats(kv["camera_principal_point"]),
                      int(kv["camera_width"]), int(kv["camera_height"])),
        head_center=_floats(kv["head_center"]),
    )
