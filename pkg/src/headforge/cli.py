"""Command-line entry points for every pipeline stage.

All randomness is controlled by --seed; seeded commands are bit-reproducible.
Failures print a single machine-readable line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headforge",
                                     description="3D head modeling and pose manipulation")
    parser.add_argument("--config", default=os.environ.get("HEADFORGE_CONFIG"),
                        help="key=value configuration file (or HEADFORGE_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-model", help="generate a synthetic head model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subdiv", type=int, default=3)
    p.add_argument("--k-id", type=int, default=16)
    p.add_argument("--k-exp", type=int, default=8)
    p.add_argument("--k-tex", type=int, default=16)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("synth-scene", help="generate a synthetic two-view scene bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--subdiv", type=int, default=3)
    p.add_argument("--k-id", type=int, default=16)
    p.add_argument("--k-exp", type=int, default=8)
    p.add_argument("--k-tex", type=int, default=16)
    p.add_argument("--yaw", type=float, default=10.0, help="relative yaw between views (deg)")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("fit-face", help="fit coefficients, lighting and pose to one view")
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, default=1, choices=(1, 2))
    p.add_argument("--init", choices=("neutral", "gt", "perturbed"), default="neutral")
    p.add_argument("--perturb-coeff", type=float, default=0.2)
    p.add_argument("--perturb-rot", type=float, default=5.0)
    p.add_argument("--perturb-trans", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("fit-depth", help="fit the depth pair for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--face-fit1", help="fit-face output dir for view 1 (default: ground truth)")
    p.add_argument("--face-fit2", help="fit-face output dir for view 2 (default: ground truth)")
    p.add_argument("--no-face-depth", action="store_true",
                   help="ablate conditioning: flat init, w_face=w_layer=0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("fit-depth-single", help="prior-only single-view depth")
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, default=1, choices=(1, 2))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("render", help="render a model instance")
    p.add_argument("--model", required=True)
    p.add_argument("--coeffs", help="key=value file with alpha/beta/delta (default zeros)")
    p.add_argument("--pose", help="key=value pose file (default frontal at 1 m)")
    p.add_argument("--gamma", help="key=value file with gamma (default unit ambient)")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--depth-out")
    p.add_argument("--mask-out")

    p = sub.add_parser("rotate", help="re-render head assets under a pose change")
    p.add_argument("--assets", required=True)
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--roll", type=float, default=0.0)
    p.add_argument("--tx", type=float, default=0.0)
    p.add_argument("--ty", type=float, default=0.0)
    p.add_argument("--tz", type=float, default=0.0)
    p.add_argument("--fill", action="store_true", help="fill vacated holes harmonically")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mask-out")

    p = sub.add_parser("fill", help="harmonic hole fill")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("eval", help="3D reconstruction error of predicted depth")
    p.add_argument("--pred", required=True, help="directory with depth1.dpth (and depth2.dpth)")
    p.add_argument("--gt", required=True, help="scene bundle directory")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=("losses",), default="losses")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="local render service for the pose editor")
    p.add_argument("--assets", required=True)
    p.add_argument("--port", type=int, default=int(os.environ.get("PORT", 8377)))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui-dir", help="static files served under /ui")

    return parser


def _load_fit_config(args):
    from .fit import FitConfig
    if args.config:
        from .fileio import load_config
        _, config = load_config(args.config)
    else:
        config = FitConfig()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    return config


def _cmd_synth_model(args) -> int:
    from .model import save_model, synthesize_model
    model = synthesize_model(seed=args.seed, n_subdiv=args.subdiv, k_id=args.k_id,
                             k_exp=args.k_exp, k_tex=args.k_tex)
    save_model(model, args.output)
    print(f"wrote {args.output}: {model.n_vertices} vertices, "
          f"k=({model.k_id},{model.k_exp},{model.k_tex})")
    return 0


def _cmd_synth_scene(args) -> int:
    from .fileio import save_assets, save_scene
    from .manipulate import build_assets
    from .scene import SceneSpec, synth_scene

    spec = SceneSpec(seed=args.seed, size=args.size, n_subdiv=args.subdiv,
                     k_id=args.k_id, k_exp=args.k_exp, k_tex=args.k_tex,
                     yaw2_deg=args.yaw, noise=args.noise)
    bundle = synth_scene(spec)
    save_scene(bundle, args.output)
    v = bundle.view1
    assets = build_assets(bundle.model, bundle.coeffs, v.pose, bundle.gamma,
                          v.depth_gt, v.masks, v.image, bundle.camera)
    save_assets(assets, Path(args.output) / "assets_gt")
    print(f"wrote scene bundle {args.output} (2 views, {args.size}x{args.size})")
    return 0


def _cmd_fit_face(args) -> int:
    from .fileio import (load_scene_common, load_scene_view, write_depth, write_kv,
                         write_mask, write_png)
    from .fit import fit_face
    from .losses import FaceParams
    from .model import FaceCoefficients
    from .render import SH_AMBIENT, render_face
    from .scene import SceneSpec, perturbed_init, synth_scene

    config = _load_fit_config(args)
    model, camera, gamma_gt, coeffs_gt = load_scene_common(args.scene)
    image, masks, _, _, pose_gt, landmarks = load_scene_view(args.scene, args.view)

    if args.init == "neutral":
        gamma0 = np.zeros(9)
        gamma0[0] = SH_AMBIENT
        init = FaceParams(np.zeros(model.k_id), np.zeros(model.k_exp),
                          np.zeros(model.k_tex), gamma0,
                          np.array([1.0, 0.0, 0.0, 0.0]),
                          np.array([0.0, 0.0, 1000.0]))
    elif args.init == "gt":
        init = FaceParams(coeffs_gt.alpha, coeffs_gt.beta, coeffs_gt.delta,
                          gamma_gt, pose_gt.quaternion, pose_gt.translation)
    else:
        scene_kv = _scene_spec_from_dir(args.scene)
        bundle = synth_scene(scene_kv)
        init = perturbed_init(bundle, args.view - 1, args.perturb_coeff,
                              args.perturb_rot, args.perturb_trans, seed=config.seed)

    result = fit_face(model, image, landmarks, masks, camera, config, init)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    params = result.params
    write_kv(out / "coeffs.txt", {"alpha": params.alpha, "beta": params.beta,
                                  "delta": params.delta})
    write_kv(out / "gamma.txt", {"gamma": params.gamma})
    write_kv(out / "pose.txt", {"quaternion": params.quaternion,
                                "translation": params.translation})
    image_fit, f_mask, face_depth = render_face(
        model, FaceCoefficients(params.alpha, params.beta, params.delta),
        result.pose, params.gamma, camera)
    write_png(out / "rendered.png", image_fit)
    write_mask(out / "coverage_F.png", f_mask)
    write_depth(out / "face_depth.dpth", face_depth)
    _write_trace(out / "trace.csv", result.trace,
                 ["iteration", "photo", "landmark", "reg", "energy", "best_energy"])
    print(f"fit-face view {args.view}: energy {result.energy:.6f} "
          f"({result.iterations_run} iterations)")
    if result.diagnostic:
        print(f"warning: {result.diagnostic}", file=sys.stderr)
    return 0


def _scene_spec_from_dir(scene_dir):
    from .fileio import read_kv
    from .scene import SceneSpec
    kv = read_kv(Path(scene_dir) / "scene.txt")
    return SceneSpec(seed=int(kv["seed"]), size=int(kv["size"]),
                     n_subdiv=int(kv["n_subdiv"]), k_id=int(kv["k_id"]),
                     k_exp=int(kv["k_exp"]), k_tex=int(kv["k_tex"]),
                     coeff_std=float(kv["coeff_std"]),
                     hair_offset_mm=float(kv["hair_offset_mm"]),
                     hair_texture_freq=float(kv["hair_texture_freq"]),
                     head_distance_mm=float(kv["head_distance_mm"]),
                     yaw2_deg=float(kv["yaw2_deg"]), noise=float(kv["noise"]))


def _write_trace(path, trace, columns) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in trace:
            fh.write(",".join(f"{x:.9g}" for x in row) + "\n")


def _load_face_fit(fit_dir, scene_dir, view):
    """Pose and face depth either from a fit-face output or scene ground truth."""
    from .fileio import load_scene_view, pose_from_kv, read_depth, read_kv
    if fit_dir:
        d = Path(fit_dir)
        pose = pose_from_kv(read_kv(d / "pose.txt"))
        face_depth = read_depth(d / "face_depth.dpth")
    else:
        _, _, _, face_depth, pose, _ = load_scene_view(scene_dir, view)
    return pose, face_depth


def _cmd_fit_depth(args) -> int:
    from .fileio import (load_scene_common, load_scene_view, save_assets, write_depth)
    from .fit import fit_depth_pair
    from .manipulate import build_assets
    from .model import FaceCoefficients
    from .fileio import read_kv, pose_from_kv, _floats

    config = _load_fit_config(args)
    model, camera, gamma_gt, coeffs_gt = load_scene_common(args.scene)
    image1, masks1, _, facedepth1_gt, pose1_gt, _ = load_scene_view(args.scene, 1)
    image2, masks2, _, facedepth2_gt, pose2_gt, _ = load_scene_view(args.scene, 2)
    pose1, face_depth1 = _load_face_fit(args.face_fit1, args.scene, 1)
    pose2, face_depth2 = _load_face_fit(args.face_fit2, args.scene, 2)

    result = fit_depth_pair(image1, image2, masks1, masks2, face_depth1, face_depth2,
                            pose1, pose2, camera, config,
                            condition_on_face=not args.no_face_depth)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_depth(out / "depth1.dpth", result.depth1)
    write_depth(out / "depth2.dpth", result.depth2)
    _write_trace(out / "trace.csv", result.trace,
                 ["iteration", "color", "grad", "smooth", "face", "layer",
                  "energy", "best_energy"])

    coeffs, gamma = coeffs_gt, gamma_gt
    if args.face_fit1:
        ckv = read_kv(Path(args.face_fit1) / "coeffs.txt")
        coeffs = FaceCoefficients(_floats(ckv["alpha"]), _floats(ckv["beta"]),
                                  _floats(ckv["delta"]))
        gamma = _floats(read_kv(Path(args.face_fit1) / "gamma.txt")["gamma"])
    assets = build_assets(model, coeffs, pose1, gamma, result.depth1, masks1,
                          image1, camera)
    save_assets(assets, out / "assets")
    print(f"fit-depth: energy {result.energy:.6f} ({result.iterations_run} iterations)"
          + (" [degenerate pair]" if result.degenerate_pair else ""))
    if result.diagnostic:
        print(f"warning: {result.diagnostic}", file=sys.stderr)
    return 0


def _cmd_fit_depth_single(args) -> int:
    from .fileio import load_scene_common, load_scene_view, save_assets, write_depth
    from .fit import fit_depth_single
    from .manipulate import build_assets

    config = _load_fit_config(args)
    model, camera, gamma_gt, coeffs_gt = load_scene_common(args.scene)
    image, masks, _, face_depth, pose, _ = load_scene_view(args.scene, args.view)
    result = fit_depth_single(image, masks, face_depth, config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_depth(out / "depth1.dpth", result.depth1)
    _write_trace(out / "trace.csv", result.trace,
                 ["iteration", "smooth", "face", "layer", "energy", "best_energy"])
    assets = build_assets(model, coeffs_gt, pose, gamma_gt, result.depth1, masks,
                          image, camera)
    save_assets(assets, out / "assets")
    print(f"fit-depth-single: energy {result.energy:.6f}")
    return 0


def _cmd_render(args) -> int:
    from .fileio import (pose_from_kv, read_kv, write_depth, write_kv, write_mask,
                         write_png, _floats)
    from .geometry import Camera, Pose
    from .model import FaceCoefficients, load_model
    from .render import SH_AMBIENT, render_face

    model = load_model(args.model)
    coeffs = FaceCoefficients.zeros(model)
    if args.coeffs:
        kv = read_kv(args.coeffs)
        coeffs = FaceCoefficients(_floats(kv["alpha"]), _floats(kv["beta"]),
                                  _floats(kv["delta"]))
    pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0, 1000.0]))
    if args.pose:
        pose = pose_from_kv(read_kv(args.pose))
    gamma = np.zeros(9)
    gamma[0] = SH_AMBIENT
    if args.gamma:
        gamma = _floats(read_kv(args.gamma)["gamma"])
    camera = Camera.default(args.size)
    image, mask, depth = render_face(model, coeffs, pose, gamma, camera)
    write_png(args.output, image)
    if args.depth_out:
        write_depth(args.depth_out, depth)
    if args.mask_out:
        write_mask(args.mask_out, mask)
    print(f"rendered {int(mask.sum())} covered pixels to {args.output}")
    return 0


def _cmd_rotate(args) -> int:
    from .fileio import load_assets, write_mask, write_png
    from .manipulate import PoseDelta, fill_holes, manipulate_pose

    assets = load_assets(args.assets)
    delta = PoseDelta(yaw=args.yaw, pitch=args.pitch, roll=args.roll,
                      tx=args.tx, ty=args.ty, tz=args.tz)
    image, hole, _ = manipulate_pose(assets, delta)
    metadata = None
    if args.fill:
        image = fill_holes(image, hole)
        metadata = {"headforge:filled": "1",
                    "headforge:filled_pixels": str(int(hole.sum()))}
    write_png(args.output, image, metadata=metadata)
    if args.mask_out:
        write_mask(args.mask_out, hole)
    print(f"rotated: {int(hole.sum())} hole pixels")
    return 0


def _cmd_fill(args) -> int:
    from .fileio import read_mask, read_png, write_png
    from .manipulate import fill_holes

    image = read_png(args.image)
    mask = read_mask(args.mask)
    filled = fill_holes(image, mask)
    write_png(args.output, filled,
              metadata={"headforge:filled": "1",
                        "headforge:filled_pixels": str(int(mask.sum()))})
    print(f"filled {int(mask.sum())} pixels")
    return 0


def _cmd_eval(args) -> int:
    from .fileio import load_scene_common, load_scene_view, read_depth
    from .fit import depth_map_points, evaluate_reconstruction

    _, camera, _, _ = load_scene_common(args.gt)
    face_err_sum, nonface_err_sum, n = 0.0, 0.0, 0
    for view in (1, 2):
        pred_path = Path(args.pred) / f"depth{view}.dpth"
        if not pred_path.exists():
            continue
        pred = read_depth(pred_path)
        _, masks, gt_depth, _, _, _ = load_scene_view(args.gt, view)
        pred_pts, gt_pts, face_flags = depth_map_points(pred, gt_depth, masks, camera)
        face_err, nonface_err = evaluate_reconstruction(pred_pts, gt_pts, face_flags)
        face_err_sum += face_err
        nonface_err_sum += nonface_err
        n += 1
    if n == 0:
        raise FileNotFoundError(f"no depth1.dpth/depth2.dpth under {args.pred}")
    print(f"face {face_err_sum / n:.3f} non-face {nonface_err_sum / n:.3f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_ok, run_gradcheck

    results = run_gradcheck(seed=args.seed, size=args.size)
    for r in results:
        print(r.line())
    return 0 if gradcheck_ok(results) else 1


def _cmd_serve(args) -> int:
    from .fileio import load_assets
    from .service import serve

    assets = load_assets(args.assets)
    serve(assets, host=args.host, port=args.port, ui_dir=args.ui_dir)
    return 0


_HANDLERS = {
    "synth-model": _cmd_synth_model,
    "synth-scene": _cmd_synth_scene,
    "fit-face": _cmd_fit_face,
    "fit-depth": _cmd_fit_depth,
    "fit-depth-single": _cmd_fit_depth_single,
    "render": _cmd_render,
    "rotate": _cmd_rotate,
    "fill": _cmd_fill,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "serve": _cmd_serve,
}


def run_command(argv) -> int:
    """Parse and dispatch; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # single-line machine-readable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
