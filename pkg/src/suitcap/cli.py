"""Batch pipeline driver: simulate | reconstruct | fit | inpaint | eval | export-mesh.

Configuration comes from a JSON file plus `--set key.path=value` overrides
(flags win); the environment variable MOCAP_SEED overrides the configured
seed. Identical configuration and seed produce byte-identical outputs.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 unreadable
calibration, 5 registration divergence, 6 constrained-solve failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import detection, inpaint, reconstruct, refine, registration, reporting, simulator
from .errors import CalibrationError, ConfigError, DivergedICP, SingularKKT
from .geometry import load_calibration, save_calibration
from .layout import load_layout, save_layout
from .skinning import export_obj, load_model, save_model
from .triangulate import CameraArrays

DEFAULT_CONFIG = {
    "seed": 0,
    "workers": 1,
    "cluster_radius": 3.0,
    "paths": {
        "output_dir": "out",
        "calibration": None,
        "layout": None,
        "detections": None,
        "truth": None,
        "clouds": None,
        "model": None,
        "template": None,
        "seeds": None,
        "init_model": None,
        "animation": None,
        "report_prefix": None,
    },
    "scene": {
        "preset": "stick_figure",
        "frames": 100,
        "n_cameras": 16,
        "breathing_amplitude": 0.0,
        "breathing_period": 100.0,
        "animation_strength": 1.0,
        "strips": 6,
        "codes_per_strip": 10,
        "radius": 150.0,
    },
    "noise": {"pixel_sigma": 0.2, "dropout_prob": 0.0, "mislabel_prob": 0.0},
    "refine": {
        "lambda_g": 1000.0,
        "lambda_j": 1.0,
        "outer_iterations": 100,
        "convergence_tol": 1e-5,
        "prune_top": 4,
    },
    "window": {"length": 150, "overlap": 50, "w_temporal": 100.0},
    "fit": {"perturb_joints": 0.0, "blur_weights": 0},
    "inpaint": {"fit_poses": "auto"},  # auto | always | never
}


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {p!r} of --set {key}")
    node[parts[-1]] = value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                _deep_update(cfg, json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    if "MOCAP_SEED" in os.environ:
        try:
            cfg["seed"] = int(os.environ["MOCAP_SEED"])
        except ValueError as e:
            raise ConfigError(f"MOCAP_SEED must be an integer: {e}") from e
    for assignment in args.set or []:
        _apply_set(cfg, assignment)
    if args.workers is not None:
        cfg["workers"] = args.workers
    return cfg


def _paths(cfg) -> dict:
    out = Path(cfg["paths"]["output_dir"])
    defaults = {
        "calibration": out / "calibration.json",
        "layout": out / "layout.json",
        "detections": out / "detections.jsonl",
        "truth": out / "truth.jsonl",
        "clouds": out / "clouds.jsonl",
        "model": out / "model.json",
        "animation": out / "animation.bin",
        "report_prefix": out / "report",
    }
    resolved = {}
    for k, v in cfg["paths"].items():
        if v is not None:
            resolved[k] = Path(v)
        elif k in defaults:
            resolved[k] = defaults[k]
        else:
            resolved[k] = None
    resolved["output_dir"] = out
    return resolved


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg) -> int:
    paths = _paths(cfg)
    paths["output_dir"].mkdir(parents=True, exist_ok=True)
    scene_cfg = dict(cfg["scene"])
    n_frames = int(scene_cfg.pop("frames"))
    scene_cfg["seed"] = cfg["seed"]
    scene = simulator.scene_from_spec(scene_cfg)
    noise = detection.OracleNoiseConfig(
        pixel_sigma=float(cfg["noise"]["pixel_sigma"]),
        dropout_prob=float(cfg["noise"]["dropout_prob"]),
        mislabel_prob=float(cfg["noise"]["mislabel_prob"]),
        seed=int(cfg["seed"]),
    )
    save_layout(scene.layout, paths["layout"])
    save_calibration(scene.rig, paths["calibration"])

    n_corner_obs = 0
    n_readings = 0
    with open(paths["detections"], "w", encoding="utf-8") as det_f, open(
        paths["truth"], "w", encoding="utf-8"
    ) as truth_f:
        for k in range(n_frames):
            pos = scene.positions(k)
            vis = simulator.compute_visibility(scene, k, positions=pos)
            for cam in scene.rig:
                frame = detection.oracle_detect(
                    k, cam, pos, vis.visible_corners[cam.id], vis.visible_quads[cam.id],
                    scene.layout, noise,
                )
                n_corner_obs += len(frame.corners)
                n_readings += len(frame.readings)
                det_f.write(detection.frame_to_json(frame) + "\n")
            truth_f.write(_truth_line(k, pos, vis) + "\n")
    print(f"simulated {n_frames} frames x {len(scene.rig)} cameras")
    print(f"corners: {scene.layout.n_corners} on suit, {n_corner_obs} detections")
    print(f"codes: {len(scene.layout.codes)} on suit, {n_readings} readings")
    return 0


def _truth_line(k, pos, vis) -> str:
    counts: dict[int, list] = {}
    for cam_id, ids in vis.visible_corners.items():
        for cid in ids:
            counts.setdefault(int(cid), []).append(int(cam_id))
    points = [
        {"id": cid, "p": [float(v) for v in pos[cid]], "cams": sorted(cams), "err": 0.0}
        for cid, cams in sorted(counts.items())
    ]
    return json.dumps({"frame": k, "truth": True, "points": points, "discarded": []})


def _reconstruct_chunk(args):
    frames_by_index, rig, layout, radius = args
    out = []
    arr = CameraArrays.from_rig(rig)
    for k in sorted(frames_by_index):
        out.append(reconstruct.reconstruct_frame(frames_by_index[k], rig, layout, radius, arr=arr))
    return out


def cmd_reconstruct(cfg) -> int:
    paths = _paths(cfg)
    rig = load_calibration(paths["calibration"])
    layout = load_layout(paths["layout"])
    frames = detection.read_detections(paths["detections"])
    by_frame: dict[int, list] = {}
    for f in frames:
        by_frame.setdefault(f.frame_index, []).append(f)

    workers = int(cfg["workers"]) or 1
    radius = float(cfg["cluster_radius"])
    keys = sorted(by_frame)
    if workers > 1 and len(keys) > 1:
        chunks = [
            ({k: by_frame[k] for k in keys[i::workers]}, rig, layout, radius)
            for i in range(workers)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_reconstruct_chunk, chunks))
        clouds = sorted((c for chunk in results for c in chunk), key=lambda c: c.frame_index)
    else:
        clouds = _reconstruct_chunk((by_frame, rig, layout, radius))

    reconstruct.write_clouds(clouds, paths["clouds"])
    _write_reconstruct_report(cfg, paths, clouds)
    n_pts = sum(len(c.points) for c in clouds)
    print(f"reconstructed {n_pts} labeled points over {len(clouds)} frames")
    return 0


def _write_reconstruct_report(cfg, paths, clouds) -> None:
    errors = np.array(
        [e for c in clouds for rec in c.points.values() for e in rec.per_camera_err]
    )
    table = reporting.percentile_table(errors)
    discards = reporting.discard_histogram(clouds)
    prefix = paths["report_prefix"]
    prefix.parent.mkdir(parents=True, exist_ok=True)
    rows = [["percentile", "reproj_err_px"]] + [[k, v] for k, v in table.items()]
    rows.append([])
    rows.append(["discard_reason", "count"])
    rows.extend([k, v] for k, v in sorted(discards.items()))
    reporting.write_csv(str(prefix) + "_reconstruct.csv", [], rows)
    reporting.write_json(
        str(prefix) + "_reconstruct.json",
        {"reprojection_percentiles": table, "discards": discards, "observations": int(errors.size)},
    )


def cmd_fit(cfg) -> int:
    paths = _paths(cfg)
    layout = load_layout(paths["layout"])
    clouds = reconstruct.read_clouds(paths["clouds"])
    rng = np.random.default_rng(int(cfg["seed"]))

    if paths["init_model"] is not None:
        model0 = load_model(paths["init_model"])
    elif paths["template"] is not None and paths["seeds"] is not None:
        template = registration.load_template(paths["template"])
        with open(paths["seeds"], "r", encoding="utf-8") as f:
            seeds = {
                int(e["id"]): (int(e["tri"]), np.array(e["bary"], dtype=float))
                for e in json.load(f)
            }
        result = registration.register_icp(
            clouds[0], template, seeds, layout, extra_clouds=clouds[1:6]
        )
        model0 = result.model
    else:
        raise ConfigError("fit needs either paths.init_model or paths.template + paths.seeds")

    fit_cfg = cfg["fit"]
    if float(fit_cfg["perturb_joints"]) > 0:
        d = rng.normal(size=model0.joints.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        model0.joints = model0.joints + d * float(fit_cfg["perturb_joints"])
    for _ in range(int(fit_cfg["blur_weights"])):
        model0.weights = _blur_weights(model0.weights, layout)

    before_rms = refine.fitting_rms(model0, clouds)
    rcfg = refine.RefineConfig(
        lambda_g=float(cfg["refine"]["lambda_g"]),
        lambda_j=float(cfg["refine"]["lambda_j"]),
        outer_iterations=int(cfg["refine"]["outer_iterations"]),
        convergence_tol=float(cfg["refine"]["convergence_tol"]),
        prune_top=int(cfg["refine"]["prune_top"]),
    )
    result = refine.refine(model0, clouds, layout, rcfg)
    save_model(result.model, paths["model"])

    prefix = paths["report_prefix"]
    prefix.parent.mkdir(parents=True, exist_ok=True)
    after_rms = result.fit_rms_trace[-1]
    rows = [[i, l] for i, l in enumerate(result.loss_trace)]
    reporting.write_csv(str(prefix) + "_fit_loss.csv", ["outer_iteration", "loss"], rows)
    _write_fit_histograms(str(prefix), model0, result.model, clouds)
    mono = all(nxt <= prev + 1e-9 for prev, nxt in zip(result.loss_trace, result.loss_trace[1:]))
    print(f"fitting rms: before {before_rms:.4f} mm -> after {after_rms:.4f} mm")
    print(f"loss trace non-increasing: {mono}")
    return 0


def _blur_weights(W, layout):
    edges = layout.edges()
    out = W.copy()
    acc = W.copy()
    deg = np.ones(len(W))
    valid = edges[(edges[:, 0] < len(W)) & (edges[:, 1] < len(W))]
    np.add.at(acc, valid[:, 0], W[valid[:, 1]])
    np.add.at(acc, valid[:, 1], W[valid[:, 0]])
    np.add.at(deg, valid[:, 0], 1.0)
    np.add.at(deg, valid[:, 1], 1.0)
    out = acc / deg[:, None]
    return out / out.sum(axis=1, keepdims=True)


def _write_fit_histograms(prefix, model0, model1, clouds) -> None:
    def per_obs_errors(model):
        quats, roots, _ = refine.fit_poses(model, clouds)
        m = model.copy()
        m.pose_quats, m.root_translations = quats, roots
        errs = []
        for k, cloud in enumerate(clouds):
            ids = np.array(sorted(i for i in cloud.points if i < m.n_vertices), dtype=int)
            pts = np.array([cloud.points[int(i)].position for i in ids]).reshape(-1, 3)
            from .skinning import skin_all

            v = skin_all(m, k)[ids]
            errs.extend(np.linalg.norm(v - pts, axis=1))
        return np.array(errs)

    e0 = per_obs_errors(model0)
    e1 = per_obs_errors(model1)
    edges, c0 = reporting.log_histogram(e0, lo=1e-3, hi=1e3)
    _, c1 = reporting.log_histogram(e1, lo=1e-3, hi=1e3)
    rows = [
        [f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(c0[i]), int(c1[i])]
        for i in range(len(c0))
    ]
    reporting.write_csv(
        prefix + "_fit_hist.csv", ["bin_lo_mm", "bin_hi_mm", "initial", "refined"], rows
    )
    reporting.svg_histogram(prefix + "_fit_hist.svg", edges, c1, "fitting error (refined)", "mm")


def cmd_inpaint(cfg) -> int:
    paths = _paths(cfg)
    layout = load_layout(paths["layout"])
    model = load_model(paths["model"])
    clouds = reconstruct.read_clouds(paths["clouds"])

    mode = cfg["inpaint"]["fit_poses"]
    if mode == "always" or (mode == "auto" and model.n_frames != len(clouds)):
        quats, roots, _ = refine.fit_poses(model, clouds)
        model.pose_quats, model.root_translations = quats, roots

    L = inpaint.build_spatial_laplacian(layout, model.rest_vertices)
    constraints = inpaint.unpose_observations(model, clouds)
    plan = inpaint.WindowPlan(int(cfg["window"]["length"]), int(cfg["window"]["overlap"]))
    field = inpaint.solve_sequence(L, constraints, plan, float(cfg["window"]["w_temporal"]))

    K = len(clouds)
    positions = np.stack([inpaint.complete_mesh(model, field, k) for k in range(K)])
    anim_path = paths["animation"]
    anim_path.parent.mkdir(parents=True, exist_ok=True)
    if str(anim_path).endswith(".bin"):
        inpaint.write_animation_binary(anim_path, positions)
    else:
        anim_path.mkdir(parents=True, exist_ok=True)
        for k in range(K):
            export_obj(positions[k], layout.faces, anim_path / f"frame_{k:05d}.obj")

    prefix = paths["report_prefix"]
    prefix.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, cloud in enumerate(clouds):
        observed = len([i for i in cloud.points if i < model.n_vertices])
        rows.append([k, observed, model.n_vertices - observed])
    reporting.write_csv(str(prefix) + "_inpaint.csv", ["frame", "observed", "filled"], rows)
    n_windows = len(plan.starts(K)) if K > plan.window_length else 1
    print(f"inpainted {K} frames ({n_windows} window{'s' if n_windows != 1 else ''})")
    return 0


def cmd_eval(cfg) -> int:
    paths = _paths(cfg)
    rig = load_calibration(paths["calibration"])
    layout = load_layout(paths["layout"])
    clouds = reconstruct.read_clouds(paths["clouds"])
    frames = detection.read_detections(paths["detections"])
    arr = CameraArrays.from_rig(rig)
    idx_of = arr.index_of_id()

    obs_pixels: dict[tuple, np.ndarray] = {}
    for f in frames:
        obs, _ = reconstruct.consolidate_labels(
            detection.cluster_frame(f, float(cfg["cluster_radius"])), layout
        )
        for o in obs:
            obs_pixels[(f.frame_index, o.camera_id, o.corner_id)] = o.pixel

    errors = []
    for cloud in clouds:
        for cid, rec in cloud.points.items():
            for cam_id in rec.cameras:
                key = (cloud.frame_index, cam_id, cid)
                if key not in obs_pixels:
                    continue
                from .triangulate import project_cams

                uv, _ = project_cams(arr, np.array([idx_of[cam_id]]), rec.position.reshape(1, 3))
                errors.append(float(np.linalg.norm(uv[0] - obs_pixels[key])))
    errors = np.array(errors)

    report = {
        "observations": int(errors.size),
        "reprojection_percentiles": reporting.percentile_table(errors),
    }
    edges, counts = reporting.log_histogram(errors)
    truth_path = paths["truth"]
    if truth_path is not None and truth_path.exists():
        truth = {c.frame_index: c for c in reconstruct.read_clouds(truth_path)}
        d3 = [
            float(np.linalg.norm(rec.position - truth[c.frame_index].points[cid].position))
            for c in clouds
            if c.frame_index in truth
            for cid, rec in c.points.items()
            if cid in truth[c.frame_index].points
        ]
        if d3:
            d3 = np.array(d3)
            report["error_3d_mm"] = {
                "max": float(d3.max()),
                "mean": float(d3.mean()),
                "rms": float(np.sqrt(np.mean(d3 * d3))),
            }

    prefix = paths["report_prefix"]
    prefix.parent.mkdir(parents=True, exist_ok=True)
    reporting.write_json(str(prefix) + "_eval.json", report)
    rows = [["percentile", "reproj_err_px"]]
    rows += [[k, v] for k, v in report["reprojection_percentiles"].items()]
    rows.append([])
    rows.append(["bin_lo_px", "bin_hi_px", "count"])
    rows += [[f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(counts[i])] for i in range(len(counts))]
    reporting.write_csv(str(prefix) + "_eval.csv", [], rows)
    reporting.svg_histogram(
        str(prefix) + "_eval.svg", edges, counts, "per-camera reprojection error", "px"
    )
    print(json.dumps(report["reprojection_percentiles"]))
    return 0


def cmd_export_mesh(cfg) -> int:
    paths = _paths(cfg)
    layout = load_layout(paths["layout"])
    model = load_model(paths["model"])
    out = paths["output_dir"] / "rest_mesh.obj"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_obj(model.rest_vertices, layout.faces, out)
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "fit": cmd_fit,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
    "export-mesh": cmd_export_mesh,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="suitcap", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override config entries")
    p.add_argument("--workers", type=int, default=None, help="frame-level worker pool size")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, KeyError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except CalibrationError as e:
        print(f"calibration error: {e}", file=sys.stderr)
        return 4
    except DivergedICP as e:
        print(f"registration diverged: {e}", file=sys.stderr)
        return 5
    except SingularKKT as e:
        print(f"inpainting solve failed: {e}", file=sys.stderr)
        return 6
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
