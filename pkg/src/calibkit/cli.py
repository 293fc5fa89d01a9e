"""``calib`` command line: simulate, init, calibrate, bench, associate.

Exit status is 0 on success, 2 on any schema or validation error and 1 on
other failures. ``CALIBKIT_LOG`` (DEBUG, INFO, WARNING, ...) sets the log
level; ``-v`` raises it to DEBUG.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .association import NoiseModel, diagnostics, warmup
from .camera import CameraIntrinsics, predict_batch
from .estimators import FilterConfig
from .formats import SchemaError
from .geometry import Transform, keypoint_in_base, model_from_dict, state_to_transform
from .pipeline import DEFAULT_INITIAL_SIGMA_X, PIPELINE_KINDS, CalibrationPipeline, CalibrationState, frame_arrays
from .pnp import PnpFailure, pnp_ransac, pose_to_state
from .simulator import (
    DEFAULT_INTRINSICS,
    DEFAULT_TRUE_STATE,
    DISTURBANCE_LEVELS,
    STOCK_SCENES,
    DisturbanceSchedule,
    SceneConfig,
    apply_disturbance,
    default_camera,
    generate_scene,
    pose_errors,
    random_true_state,
    score_association,
    stock_trajectory,
)

log = logging.getLogger("calibkit")

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA = 0, 1, 2


def _setup_logging(verbose: bool) -> None:
    level = os.environ.get("CALIBKIT_LOG", "WARNING").upper()
    if verbose:
        level = "DEBUG"
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# --------------------------------------------------------------------------
# config -> objects


def _camera(cfg) -> tuple[CameraIntrinsics, Transform, tuple[int, int]]:
    cam = cfg["camera"]
    k = DEFAULT_INTRINSICS if cam["intrinsics"] is None else CameraIntrinsics.from_dict(cam["intrinsics"])
    T = default_camera() if cam["T_init"] is None else Transform.from_matrix(formats.matrix_param(cam["T_init"], 4, "camera.T_init"))
    if not T.is_rigid(1e-6):
        raise SchemaError("camera.T_init is not a rigid transform")
    size = (1280, 1024) if cam["image_size"] is None else tuple(int(v) for v in cam["image_size"])
    return k, T, size


def _model(cfg):
    m = cfg["model"]
    if "inline" in m:
        return model_from_dict(m["inline"]), None
    return formats.resolve_model(m["ref"]), m["ref"]


def scene_from_config(cfg: dict, seed: int) -> tuple[SceneConfig, formats.StreamHeader]:
    sc = cfg["scene"]
    k, T, size = _camera(cfg)
    model, ref = _model(cfg)
    if sc["name"] not in STOCK_SCENES:
        raise SchemaError(f"scene.name must be one of {STOCK_SCENES}")
    truth = sc["true_state"]
    if truth is None:
        truth = np.array(DEFAULT_TRUE_STATE)
    elif truth == "random":
        truth = random_true_state(np.random.default_rng([seed, 0x7275]))
    else:
        truth = formats.as_floats(truth, (6,), "scene.true_state")
    n = int(sc["frame_count"])
    dist = DisturbanceSchedule(sc["disturbance"], int(sc["disturbance_period"]), sc["disturbance_target"])
    scene = SceneConfig(
        model=model,
        intrinsics=k,
        T_init=T,
        true_state=truth,
        trajectory=stock_trajectory(sc["name"], n, seed),
        frame_count=n,
        pixel_noise_sigma=float(sc["pixel_noise_sigma"]),
        outlier_count=int(sc["outlier_count"]),
        outlier_box=(0.0, 0.0, float(size[0]), float(size[1])),
        dropout_probability=float(sc["dropout_probability"]),
        disturbance=dist,
        rng_seed=seed,
        min_view_cos=sc["min_view_cos"],
        image_size=size,
    )
    header = formats.StreamHeader(k, T, model, ref, size, {"scene": sc["name"], "seed": seed})
    return scene, header


def _filter_config(cfg: dict, kind: str, seed: int, pf_adapt_cov: bool) -> FilterConfig:
    f = cfg["filter"]
    kw = {}
    se = formats.matrix_param(f["sigma_e"], 6, "filter.sigma_e")
    sv = formats.matrix_param(f["sigma_v"], 2, "filter.sigma_v")
    if se is not None:
        kw["sigma_e"] = se
    if sv is not None:
        kw["sigma_v"] = sv
    return FilterConfig(
        kind="aekf" if kind == "pnp" else kind,
        forget_factor=float(f["forget_factor"]),
        n_particles=int(f["n_particles"]),
        n_effective=float(f["n_effective"]),
        rng_seed=seed,
        pf_adapt_cov=bool(pf_adapt_cov or f["pf_adapt_cov"]),
        **kw,
    )


def _gate(cfg: dict) -> NoiseModel:
    j = cfg["jcbb"]
    kw = {}
    se = formats.matrix_param(j["sigma_e"], 6, "jcbb.sigma_e")
    sv = formats.matrix_param(j["sigma_v"], 2, "jcbb.sigma_v")
    if se is not None:
        kw["sigma_e"] = se
    if sv is not None:
        kw["sigma_v"] = sv
    return NoiseModel(**kw)


def _initial(cfg: dict, init_path) -> CalibrationState:
    if init_path is not None:
        x, P, _ = formats.read_state(init_path)
    else:
        x = np.zeros(6) if cfg["init"]["state"] is None else formats.as_floats(cfg["init"]["state"], (6,), "init.state")
        P = formats.matrix_param(cfg["init"]["sigma_x"], 6, "init.sigma_x")
    return CalibrationState(x, DEFAULT_INITIAL_SIGMA_X if P is None else P)


def build_pipeline(cfg, header, kind, visibility, seed, initial, pf_adapt_cov=False) -> CalibrationPipeline:
    if kind not in PIPELINE_KINDS:
        raise SchemaError(f"filter must be one of {PIPELINE_KINDS}")
    return CalibrationPipeline(
        header.model,
        header.intrinsics,
        header.T_init,
        _filter_config(cfg, kind, seed, pf_adapt_cov),
        initial,
        kind=kind,
        gate_noise=_gate(cfg),
        alpha=float(cfg["jcbb"]["alpha"]),
        visibility=visibility and bool(cfg["visibility"]["enabled"]),
        gamma=float(cfg["visibility"]["gamma"]),
        node_budget=int(cfg["jcbb"]["node_budget"]),
    )


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg) -> int:
    overrides = {}
    if args.scene:
        overrides["name"] = args.scene
    if args.frames is not None:
        overrides["frame_count"] = args.frames
    if args.disturbance:
        overrides["disturbance"] = args.disturbance
    if args.disturbance_target:
        overrides["disturbance_target"] = args.disturbance_target
    if args.random_truth:
        overrides["true_state"] = "random"
    cfg["scene"].update(overrides)
    scene, header = scene_from_config(cfg, args.seed)
    n = formats.write_stream(args.out, header, generate_scene(scene))
    log.info("wrote %d frames to %s", n, args.out)
    return EXIT_OK


def _label_pool(frames, model):
    P, px = [], []
    for fr in frames:
        for pix, lbl in zip(fr.observations, fr.labels):
            if lbl is None:
                continue
            P.append(keypoint_in_base(model, fr.q, lbl))
            px.append(pix)
    return P, px


def _jcbb_pool(frames, cfg, header, x0):
    pipe = build_pipeline(cfg, header, "ekf", True, 0, CalibrationState(x0, DEFAULT_INITIAL_SIGMA_X))
    P, px = [], []
    for fr in frames:
        q, obs = frame_arrays(fr.q, fr.observations, header.n_joints)
        preds, _, _, _, hset, _ = pipe.associate(q, obs)
        by_label = {p.label: p for p in preds}
        for i, lbl in hset.pairs:
            P.append(by_label[lbl].p_r)
            px.append(obs[i])
    return P, px


def cmd_init(args, cfg) -> int:
    stream = formats.FrameStream(args.stream)
    header = stream.header
    n_req = args.frames if args.frames is not None else int(cfg["init"]["frames"])
    if n_req < 1:
        raise SchemaError("init needs at least one frame")
    frames = []
    for fr in stream:
        frames.append(fr)
        if len(frames) == n_req:
            break
    stream.close()
    if len(frames) < n_req:
        log.warning("stream has only %d frames; using all of them instead of %d", len(frames), n_req)
    have_labels = all(fr.labels is not None for fr in frames)
    use_labels = have_labels if args.labels == "auto" else args.labels == "yes"
    if use_labels and not have_labels:
        raise SchemaError("--labels yes but the stream carries no labels")
    x0 = _initial(cfg, None).x
    if use_labels:
        P, px = _label_pool(frames, header.model)
        mode = "labels"
    else:
        P, px = _jcbb_pool(frames, cfg, header, x0)
        mode = "jcbb"
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    px = np.asarray(px, dtype=float).reshape(-1, 2)
    prior = header.T_init.compose(state_to_transform(x0))
    try:
        res = pnp_ransac(
            P,
            px,
            header.intrinsics,
            iterations=int(cfg["init"]["iterations"]),
            threshold_px=float(cfg["init"]["threshold_px"]),
            seed=args.seed,
            initial_pose=prior,
        )
    except PnpFailure as exc:
        log.error("initial calibration failed: %s", exc)
        return EXIT_FAIL
    x = pose_to_state(res.pose, header.T_init)
    sigma = _pose_covariance(x, P[res.inliers], px[res.inliers], header)
    info = {
        "frames_used": len(frames),
        "correspondences": int(len(P)),
        "inliers": int(res.inliers.sum()),
        "mean_error_px": res.mean_error,
        "mode": mode,
    }
    formats.write_state(args.out, x, sigma, info)
    log.info("initial state from %d frames (%s), %d/%d inliers, %.3f px", len(frames), mode, info["inliers"], len(P), res.mean_error)
    return EXIT_OK


def _pose_covariance(x, P, px, header) -> np.ndarray:
    """Gauss-Newton covariance ``s² (HᵀH)⁻¹`` in state coordinates, floored at the prior's scale."""
    _, pred, H = predict_batch(header.T_init, x, P, header.intrinsics)
    A = H.reshape(-1, 6)
    r = (px - pred).reshape(-1)
    dof = max(len(r) - 6, 1)
    s2 = max(float(r @ r) / dof, 1e-6)
    try:
        cov = s2 * np.linalg.inv(A.T @ A)
    except np.linalg.LinAlgError:
        return DEFAULT_INITIAL_SIGMA_X.copy()
    cov = 0.5 * (cov + cov.T)
    ev, V = np.linalg.eigh(cov)
    return (V * np.maximum(ev, 1e-12)) @ V.T


def _report_row(res, fr, timing: bool) -> dict:
    row = {
        "frame": fr.index,
        "n_obs": res.n_obs,
        "n_matched": res.n_matched,
        "n_mismatched": None,
        "d2": res.d2,
        "l": res.l,
        "dt_mm": None,
        "dr_rad": None,
        "assoc_time_ms": 1000.0 * res.assoc_time_s if timing else None,
        "filter_time_ms": 1000.0 * res.filter_time_s if timing else None,
        "n_pred": res.n_pred,
        "n_pred_total": res.n_pred_total,
    }
    if fr.labels is not None:
        row["n_mismatched"] = score_association(res.assigned, fr.labels).n_mismatched
    if fr.true_state is not None:
        row["dt_mm"], row["dr_rad"] = pose_errors(res.x, fr.true_state)
    return row


def _run_stream(args, cfg, kind, on_frame=None):
    """Drive one pipeline over the stream; returns (header, pipeline, per-frame records)."""
    stream = formats.FrameStream(args.stream)
    header = stream.header
    pipe = build_pipeline(cfg, header, kind, not args.no_visibility, args.seed, _initial(cfg, getattr(args, "init", None)), args.pf_adapt_cov)
    sched = DisturbanceSchedule(args.disturbance or "off", int(cfg["scene"]["disturbance_period"]), "estimate")
    kick_rng = np.random.default_rng([args.seed, 0x6B1C])
    records = []
    with stream:
        for i, fr in enumerate(stream):
            if fr.estimate_kick is not None:
                pipe.kick(fr.estimate_kick)
            if sched.scheduled(i):
                pipe.kick(apply_disturbance(np.zeros(6), sched, i, kick_rng))
            res = pipe.process(fr.q, fr.observations, fr.index)
            records.append((fr, res))
            if on_frame is not None:
                on_frame(fr, res)
    return header, pipe, records


def cmd_calibrate(args, cfg) -> int:
    kind = args.filter or cfg["filter"]["kind"]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = formats.ReportWriter(out / "report.csv")
    timing = not args.no_timing
    trace_frames, trace_x, trace_true = [], [], []
    labels_seen = {"matched": 0, "correct": 0, "inliers": 0}

    def on_frame(fr, res):
        report.write(_report_row(res, fr, timing))
        trace_frames.append(fr.index)
        trace_x.append(res.x)
        trace_true.append(fr.true_state)
        if fr.labels is not None:
            s = score_association(res.assigned, fr.labels)
            labels_seen["matched"] += s.n_matched
            labels_seen["correct"] += s.n_correct
            labels_seen["inliers"] += s.n_inliers

    try:
        header, pipe, records = _run_stream(args, cfg, kind, on_frame)
    except Exception as exc:
        report.fail(f"{type(exc).__name__}: {exc}")
        raise
    report.close()
    formats.write_trace(out / "trace.csv", trace_frames, np.asarray(trace_x).reshape(-1, 6), trace_true)
    summary = {
        "report_version": formats.REPORT_VERSION,
        "filter": kind,
        "visibility": pipe.visibility,
        "seed": args.seed,
        "n_frames": len(records),
        "complete": True,
        "final_state": pipe.x.tolist(),
        "columns": formats.summarize(report.rows),
    }
    if labels_seen["matched"] or labels_seen["inliers"]:
        m, c, n = labels_seen["matched"], labels_seen["correct"], labels_seen["inliers"]
        summary["association"] = {"precision": c / m if m else None, "recall": c / n if n else None}
    formats.write_json(out / "summary.json", summary)
    log.info("calibrated %d frames with %s; final x = %s", len(records), kind, np.array2string(pipe.x, precision=5))
    return EXIT_OK


def _stats_ms(values) -> dict:
    v = 1000.0 * np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "p95": float(np.percentile(v, 95))}


def cmd_bench(args, cfg) -> int:
    kinds = [args.filter] if args.filter else ["ekf", "aekf", "pf"]
    timing = not args.no_timing
    warmup()
    doc = {"report_version": formats.REPORT_VERSION, "visibility": not args.no_visibility, "seed": args.seed, "filters": {}}
    for kind in kinds:
        t0 = time.perf_counter()
        _, _, records = _run_stream(args, cfg, kind)
        wall = time.perf_counter() - t0
        res = [r for _, r in records]
        entry = {
            "n_frames": len(res),
            "mean_predictions": float(np.mean([r.n_pred for r in res])) if res else None,
            "mean_predictions_before_pruning": float(np.mean([r.n_pred_total for r in res])) if res else None,
            "mean_matched": float(np.mean([r.n_matched for r in res])) if res else None,
            "final_state": res[-1].x.tolist() if res else None,
        }
        if timing and res:
            a = [r.assoc_time_s for r in res]
            f = [r.filter_time_s for r in res]
            tot = [x + y for x, y in zip(a, f)]
            entry.update(
                assoc_ms=_stats_ms(a),
                filter_ms=_stats_ms(f),
                pipeline_ms=_stats_ms(tot),
                frames_per_second=len(res) / sum(tot) if sum(tot) > 0 else None,
                wall_s=wall,
            )
        doc["filters"][kind] = entry
    formats.write_json(args.out, doc)
    return EXIT_OK


def cmd_associate(args, cfg) -> int:
    stream = formats.FrameStream(args.stream)
    header = stream.header
    target = None
    with stream:
        for fr in stream:
            if fr.index == args.frame:
                target = fr
                break
    if target is None:
        raise SchemaError(f"frame {args.frame} not found in {args.stream}")
    initial = _initial(cfg, args.init)
    pipe = build_pipeline(cfg, header, "ekf", not args.no_visibility, args.seed, initial)
    q, obs = frame_arrays(target.q, target.observations, header.n_joints)
    preds, n_total, obs_list, cands, hset, verdict = pipe.associate(q, obs)
    doc = diagnostics(preds, obs_list, cands, hset)
    doc.update(
        frame=target.index,
        state=initial.x.tolist(),
        n_pred_total=n_total,
        visible_sides=sorted(verdict.visible_sides) if verdict is not None else None,
        dominant_side=verdict.dominant if verdict is not None else None,
        ratios=[None if not math.isfinite(r) else r for r in verdict.ratios] if verdict is not None else None,
    )
    if target.labels is not None:
        s = score_association([h.pred_label for h in hset.assignments], target.labels)
        doc["truth"] = list(target.labels)
        doc["precision"] = None if math.isnan(s.precision) else s.precision
        doc["recall"] = None if math.isnan(s.recall) else s.recall
    formats.write_json(args.out, doc)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, default=0, help="seed for scene generation, RANSAC and the particle filter")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging (same as CALIBKIT_LOG=DEBUG)")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("stream", help="JSONL frame stream")
    run.add_argument("--no-visibility", action="store_true", help="skip side-visibility pruning")
    run.add_argument("--pf-adapt-cov", action="store_true", help="particle filter re-estimates the state covariance from its particles")
    run.add_argument("--disturbance", choices=["off", *DISTURBANCE_LEVELS], help="kick the estimate every period frames")
    run.add_argument("--no-timing", action="store_true", help="leave wall-clock fields empty so reports are byte-reproducible")

    p = argparse.ArgumentParser(prog="calib", description="Online hand-eye calibration from instrument keypoints.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic frame stream")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--scene", choices=STOCK_SCENES)
    s.add_argument("--frames", type=int)
    s.add_argument("--disturbance", choices=["off", *DISTURBANCE_LEVELS])
    s.add_argument("--disturbance-target", choices=["truth", "estimate"])
    s.add_argument("--random-truth", action="store_true", help="draw the true correction within 3 degrees / 3 cm")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("init", parents=[common], help="initial correction from the first N frames via PnP")
    s.add_argument("stream")
    s.add_argument("-n", "--frames", type=int)
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--labels", choices=["auto", "yes", "no"], default="auto", help="use stream labels or bootstrap with JCBB")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("calibrate", parents=[common, run], help="run the online estimator and write report, summary and trace")
    s.add_argument("--filter", choices=PIPELINE_KINDS)
    s.add_argument("--init", help="initial state JSON")
    s.add_argument("-o", "--out-dir", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("bench", parents=[common, run], help="per-frame timing of the estimators")
    s.add_argument("--filter", choices=PIPELINE_KINDS)
    s.add_argument("--init", help="initial state JSON")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("associate", parents=[common], help="JCBB diagnostic dump for one frame")
    s.add_argument("stream")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--init", help="state JSON to predict from (default: zero correction)")
    s.add_argument("--no-visibility", action="store_true")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_associate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = formats.load_config(args.config)
        return args.func(args, cfg)
    except SchemaError as exc:
        log.error("%s", exc)
        return EXIT_SCHEMA
    except (ValueError, KeyError, TypeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_SCHEMA
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
