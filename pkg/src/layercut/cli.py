"""Command-line entry point: `layercut <subcommand> ...`."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from layercut import config as cfgmod
from layercut.compose import penetration_count, refine_composition, transfer, visibility_cameras
from layercut.decompose import optimize_geometry, optimize_texture
from layercut.errors import AssetError, ConfigError, LayercutError, NumericError
from layercut.guidance import MockGuidance, NoiseSchedule, RemoteGuidance
from layercut.mesh import OBJECT, TriMesh, load_mesh, merge_meshes, save_mesh
from layercut.metrics import chamfer, por_score, voxel_iou, write_metrics_csv
from layercut.plotting import plot_loss_history, plot_metrics, plot_views
from layercut.raster import CameraSampling, load_mask_png, orbit_cameras, rasterize, sample_camera, save_buffers
from layercut.rig import load_pose, load_rig
from layercut.seglift import ViewMask, lift_segmentation, load_labels, load_view_manifest, save_labels
from layercut.tetgrid import build_regular_grid, load_field, marching_tetrahedra, save_field

log = logging.getLogger("layercut")


# ------------------------------------------------------------------ helpers


def _resolve(args, overrides: dict) -> dict:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    overrides = dict(overrides)
    overrides["seed"] = getattr(args, "seed", None)
    return cfgmod.apply_overrides(cfg, overrides)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AssetError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _mesh(path) -> TriMesh:
    try:
        return load_mesh(path)
    except (ValueError, IndexError) as exc:
        raise AssetError(f"cannot parse mesh {path}: {exc}") from exc


def _guidance(cfg: dict, rig, target=None):
    g = cfg["guidance"]
    mode = g["mode"] or ("remote" if g["url"] else None)
    if mode == "remote":
        if not g["url"]:
            raise ConfigError("remote guidance needs --guidance-url")
        return RemoteGuidance(g["url"], timeout=float(g["timeout_ms"]) / 1000.0)
    if mode == "mock":
        if target is not None:
            return MockGuidance(target)
        choice = g["mock_target"]
        if choice == "template":
            from layercut.synthetic import template_target

            return MockGuidance(template_target(rig))
        try:
            value = float(choice)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"guidance.mock_target must be 'template' or a number, got {choice!r}") from exc
        return MockGuidance(lambda x_t, cond: np.full(np.shape(x_t), value))
    if mode is None:
        raise ConfigError("no guidance configured: pass --guidance-url URL or --guidance mock")
    raise ConfigError(f"unknown guidance mode {mode!r}")


def _write_history(history, path) -> None:
    keys = ["phase", "step", "rec_h", "rec_o", "seg", "sds_h", "sds_o", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for i, h in enumerate(history):
            w.writerow([h.get("phase", ""), h.get("step", i)] + [repr(float(h[k])) if k in h else "" for k in keys[2:]])


def _poses(paths):
    return tuple(load_pose(p) for p in paths or ())


# -------------------------------------------------------------- subcommands


def cmd_lift(args) -> int:
    cfg = _resolve(args, {"lift.min_votes": args.min_votes})
    out = Path(args.out)
    _out_dir(out.parent)
    scan = _mesh(args.scan)
    views = load_view_manifest(args.views)
    labels = lift_segmentation(scan, views, cfg["lift"]["min_votes"])
    save_labels(labels, out)
    cfgmod.write_snapshot(cfg, out.parent)
    log.info("lifted %d faces: %d object", len(labels), int(np.count_nonzero(labels == OBJECT)))
    return 0


def _geometry_overrides(args) -> dict:
    return {
        "grid.resolution": args.resolution,
        "guidance.mode": args.guidance,
        "guidance.url": args.guidance_url,
        "guidance.timeout_ms": args.guidance_timeout_ms,
        "prompts.gender": args.gender,
        "prompts.object": args.object_name,
        "schedule.init_steps": getattr(args, "init_steps", None),
        "schedule.geo_steps": getattr(args, "geo_steps", None),
        "schedule.tex_steps": getattr(args, "tex_steps", None),
        "schedule.checkpoint_every": getattr(args, "checkpoint_every", None),
    }


def cmd_decompose(args) -> int:
    cfg = _resolve(args, _geometry_overrides(args))
    out = _out_dir(args.out_dir)
    scan = _mesh(args.scan)
    labels = load_labels(args.labels)
    if len(labels) != scan.n_faces:
        raise ConfigError(f"{len(labels)} labels for {scan.n_faces} scan faces")
    rig = load_rig(args.rig)
    pose = load_pose(args.pose)
    guidance = _guidance(cfg, rig)
    cfgmod.write_snapshot(cfg, out)
    grid = build_regular_grid(int(cfg["grid"]["resolution"]))
    sched = cfgmod.optim_schedule(cfg, (pose,) + _poses(args.pose_set))
    ckpt = out / "checkpoints"

    def on_checkpoint(step, fh, fo):
        ckpt.mkdir(exist_ok=True)
        save_field(ckpt / f"step{step:05d}_human.lctg", grid, fh)
        save_field(ckpt / f"step{step:05d}_object.lctg", grid, fo)

    try:
        res = optimize_geometry(grid, scan, labels, rig, pose, cfgmod.loss_weights(cfg), sched, guidance,
                                prompts=cfgmod.prompt_config(cfg), on_checkpoint=on_checkpoint,
                                progress=_progress("geo"))
    except NumericError as exc:
        if getattr(exc, "last_good", None) is not None:
            save_field(out / "last_good_human.lctg", grid, exc.last_good[0])
            save_field(out / "last_good_object.lctg", grid, exc.last_good[1])
        raise
    save_field(out / "human.lctg", grid, res.field_h)
    save_field(out / "object.lctg", grid, res.field_o)
    save_mesh(marching_tetrahedra(grid, res.field_h), out / "human.obj")
    save_mesh(marching_tetrahedra(grid, res.field_o), out / "object.obj")
    _write_history(res.history, out / "history.csv")
    plot_loss_history(res.history, out / "loss.png")
    return 0


def _progress(tag):
    def report(step, terms):
        if step % 50 == 0:
            log.info("%s step %d total %.6g", tag, step, terms["total"])
    return report


def _canonical_mesh(path):
    """OBJ/PLY mesh or an .lctg field checkpoint (extracted with MT)."""
    if str(path).endswith(".lctg"):
        try:
            grid, field = load_field(path)
        except FileNotFoundError as exc:
            raise AssetError(f"field checkpoint not found: {path}") from exc
        return marching_tetrahedra(grid, field)
    return _mesh(path)


def cmd_texture(args) -> int:
    cfg = _resolve(args, _geometry_overrides(args))
    out = _out_dir(args.out_dir)
    m_h, m_o = _canonical_mesh(args.human), _canonical_mesh(args.object)
    scan = _mesh(args.scan)
    labels = load_labels(args.labels)
    if len(labels) != scan.n_faces:
        raise ConfigError(f"{len(labels)} labels for {scan.n_faces} scan faces")
    rig = load_rig(args.rig)
    pose = load_pose(args.pose)
    guidance = _guidance(cfg, rig)
    cfgmod.write_snapshot(cfg, out)
    sched = cfgmod.optim_schedule(cfg, (pose,) + _poses(args.pose_set))
    res = optimize_texture(m_h, m_o, scan, labels, rig, pose, cfgmod.loss_weights(cfg), sched, guidance,
                           prompts=cfgmod.prompt_config(cfg), progress=_progress("tex"))
    save_mesh(m_h.replace(colors=res.colors_h), out / "human_textured.obj")
    save_mesh(m_o.replace(colors=res.colors_o), out / "object_textured.obj")
    _write_history(res.history, out / "history_texture.csv")
    plot_loss_history(res.history, out / "loss_texture.png", title="texture")
    return 0


def _refine_kwargs(cfg):
    r = cfg["refine"]
    return {"lambda_dis": float(r["lambda_dis"]), "steps": int(r["steps"]), "lr": float(r["lr"]),
            "reach": r["reach"], "cameras": visibility_cameras(size=int(r["visibility_size"]))}


def cmd_compose(args) -> int:
    cfg = _resolve(args, {"refine.lambda_dis": args.lambda_dis})
    out = _out_dir(args.out_dir)
    m_o, m_h = _canonical_mesh(args.object), _canonical_mesh(args.human)
    rig = load_rig(args.rig)
    pose = load_pose(args.pose)
    if pose.n_bones != rig.n_bones:
        raise ConfigError(f"pose has {pose.n_bones} bones but the rig has {rig.n_bones}")
    cfgmod.write_snapshot(cfg, out)
    posed = transfer(m_o, m_h, rig, pose, refine=args.refine, **(_refine_kwargs(cfg) if args.refine else {}))
    save_mesh(posed, out / "composite.obj")
    return 0


def cmd_refine(args) -> int:
    cfg = _resolve(args, {"refine.lambda_dis": args.lambda_dis, "refine.steps": args.steps})
    out = _out_dir(args.out_dir)
    m_h, m_o = _canonical_mesh(args.human), _canonical_mesh(args.object)
    cfgmod.write_snapshot(cfg, out)
    trace = []
    refined = refine_composition(m_h, m_o, trace=trace, **_refine_kwargs(cfg))
    save_mesh(refined, out / "human_refined.obj")
    log.info("penetrating vertices %d -> %d", trace[0] if trace else 0, trace[-1] if trace else 0)
    return 0


def _mask_dir(path):
    path = Path(path)
    if not path.is_dir():
        raise AssetError(f"mask directory not found: {path}")
    masks = {}
    for p in sorted(path.glob("*.png")):
        digits = "".join(c for c in p.stem.split("_")[-1] if c.isdigit())
        if digits:
            masks[int(digits)] = load_mask_png(p)
    if not masks:
        raise AssetError(f"no indexed .png masks in {path}")
    return masks


def evaluate(pairs, cfg: dict, samples=None, iou_resolution=None):
    """pairs: {name: (pred, gt)} -> list of (metric, value)."""
    m = cfg["metrics"]
    samples = samples or int(m["chamfer_samples"])
    iou_resolution = iou_resolution or int(m["iou_resolution"])
    rows = []
    for name, (pred, gt) in pairs.items():
        rows.append((f"chamfer_cm_{name}", chamfer(pred, gt, samples, int(cfg["seed"]), float(m["units_to_cm"]))))
        rows.append((f"iou_{name}", voxel_iou(pred, gt, iou_resolution)))
    return rows


def cmd_eval(args) -> int:
    cfg = _resolve(args, {"metrics.chamfer_samples": args.samples, "metrics.iou_resolution": args.iou_resolution})
    out = _out_dir(args.out_dir)
    pairs = {}
    for name in ("human", "object"):
        pred, gt = getattr(args, f"pred_{name}"), getattr(args, f"gt_{name}")
        if (pred is None) != (gt is None):
            raise ConfigError(f"--pred-{name} and --gt-{name} go together")
        if pred is not None:
            pairs[name] = (_canonical_mesh(pred), _canonical_mesh(gt))
    if len(pairs) == 2:
        pairs["composite"] = (merge_meshes(*[pairs[k][0] for k in ("human", "object")]),
                              merge_meshes(*[pairs[k][1] for k in ("human", "object")]))
    rows = evaluate(pairs, cfg)
    if (args.por_input is None) != (args.por_edited is None):
        raise ConfigError("--por-input and --por-edited go together")
    if args.por_input is not None:
        a, b = _mask_dir(args.por_input), _mask_dir(args.por_edited)
        if sorted(a) != sorted(b):
            raise ConfigError("POR mask directories hold different view indices")
        cams = orbit_cameras(int(cfg["metrics"]["views"]))
        keys = sorted(a)
        if keys[-1] >= len(cams):
            raise ConfigError(f"mask index {keys[-1]} exceeds the {len(cams)} evaluation cameras")
        rows.append(("por", por_score([(cams[k], a[k]) for k in keys], [(cams[k], b[k]) for k in keys])))
    if not rows:
        raise ConfigError("nothing to evaluate: give mesh pairs and/or POR mask directories")
    cfgmod.write_snapshot(cfg, out)
    write_metrics_csv(rows, out / "metrics.csv", cfgmod.config_hash(cfg))
    plot_metrics(rows, out / "metrics.png")
    for name, value in rows:
        print(f"{name},{value!r}")
    return 0


def cmd_render(args) -> int:
    cfg = _resolve(args, {"render.views": args.views, "render.size": args.size})
    out = _out_dir(args.out_dir)
    mesh = _canonical_mesh(args.mesh)
    if args.labels:
        labels = load_labels(args.labels)
        if len(labels) != mesh.n_faces:
            raise ConfigError(f"{len(labels)} labels for {mesh.n_faces} faces")
        mesh = mesh.replace(labels=labels)
    r = cfg["render"]
    cams = orbit_cameras(int(r["views"]), elevation=float(r["elevation"]), fov=float(r["fov"]),
                         width=int(r["size"]), height=int(r["size"]))
    cfgmod.write_snapshot(cfg, out)
    normals = []
    for i, cam in enumerate(cams):
        buf = rasterize(mesh, cam)
        save_buffers(buf, out, prefix=f"view{i:03d}")
        normals.append(buf.normal)
    plot_views(normals, out / "views.png", titles=[f"view {i}" for i in range(len(cams))])
    return 0


# ------------------------------------------------------------------- demo


def run_demo(cfg: dict, out: Path) -> list:
    """Synthetic end-to-end run; returns (check, value, threshold, passed) rows."""
    from layercut import synthetic

    d = cfg["demo"]
    seed = int(cfg["seed"])
    scene = synthetic.make_scene(int(d["rig_resolution"]), int(d["gt_resolution"]), seed)
    truth = scene.scan.labels
    save_mesh(scene.scan, out / "scan.obj")

    size = int(cfg["schedule"]["render_size"])
    cam_cfg = CameraSampling(width=size, height=size)
    views = []
    for i in range(int(d["lift_views"])):
        cam = sample_camera((seed, 99, i), cam_cfg)
        views.append(ViewMask(cam, rasterize(scene.scan, cam).seg_o))
    labels = lift_segmentation(scene.scan, views, int(cfg["lift"]["min_votes"]))
    save_labels(labels, out / "labels.txt")
    label_acc = float(np.mean(labels == truth))

    grid = build_regular_grid(int(d["grid_resolution"]))
    cfg_run = cfgmod.apply_overrides(cfg, {
        "schedule.init_steps": d["init_steps"], "schedule.geo_steps": d["geo_steps"],
        "schedule.tex_steps": d["tex_steps"], "schedule.tex_sds_warmup": d["tex_sds_warmup"],
    })
    sched = cfgmod.optim_schedule(cfg_run, scene.pose_set)
    weights = cfgmod.loss_weights(cfg_run)
    prompts = cfgmod.prompt_config(cfg_run)
    guidance = MockGuidance(synthetic.scene_target(scene), NoiseSchedule.linear())
    geo = optimize_geometry(grid, scene.scan, labels, scene.rig, scene.input_pose, weights, sched, guidance,
                            prompts=prompts, progress=_progress("geo"))
    save_field(out / "human.lctg", grid, geo.field_h)
    save_field(out / "object.lctg", grid, geo.field_o)
    m_h = marching_tetrahedra(grid, geo.field_h)
    m_o = marching_tetrahedra(grid, geo.field_o)

    tex = optimize_texture(m_h, m_o, scene.scan, labels, scene.rig, scene.input_pose, weights, sched, guidance,
                           prompts=prompts, progress=_progress("tex"))
    m_h = m_h.replace(colors=tex.colors_h)
    m_o = m_o.replace(colors=tex.colors_o)
    save_mesh(m_h, out / "human.obj")
    save_mesh(m_o, out / "object.obj")

    rk = _refine_kwargs(cfg_run)
    refined = refine_composition(m_h, m_o, **rk)
    save_mesh(refined, out / "human_refined.obj")
    posed = transfer(m_o, refined, scene.rig, synthetic.arms_down_pose(scene.rig))
    save_mesh(posed, out / "composite_posed.obj")

    rows = evaluate({"human": (m_h, scene.human), "object": (m_o, scene.object),
                     "composite": (merge_meshes(m_h, m_o), scene.composite)},
                    cfg_run, int(d["eval_samples"]), int(d["eval_iou_resolution"]))
    rows.append(("label_accuracy", label_acc))
    rows.append(("penetrating_before", penetration_count(m_h, m_o, rk["cameras"], reach=rk["reach"])))
    rows.append(("penetrating_after", penetration_count(refined, m_o, rk["cameras"], reach=rk["reach"])))
    rows.append(("geo_loss_first", geo.history[len(geo.history) - sched.geo_steps]["total"] if sched.geo_steps else 0.0))
    rows.append(("geo_loss_last", geo.history[-1]["total"]))
    write_metrics_csv(rows, out / "metrics.csv", cfgmod.config_hash(cfg_run))
    _write_history(geo.history + tex.history, out / "history.csv")
    plot_loss_history(geo.history, out / "loss.png")
    plot_metrics(rows, out / "metrics.png")

    vals = dict(rows)
    cell = 2.0 / grid.resolution
    return [
        # faces under the band are never seen, so the body scan sits a little below the hemisphere case
        ("label_accuracy", vals["label_accuracy"], 0.95, vals["label_accuracy"] >= 0.95),
        ("composite_chamfer_cells", vals["chamfer_cm_composite"] / float(cfg["metrics"]["units_to_cm"]) / cell, 3.0,
         vals["chamfer_cm_composite"] / float(cfg["metrics"]["units_to_cm"]) / cell < 3.0),
        ("geo_loss_ratio", vals["geo_loss_last"] / vals["geo_loss_first"] if vals["geo_loss_first"] else 0.0, 1.0,
         vals["geo_loss_last"] < vals["geo_loss_first"]),
        ("penetrating_after", vals["penetrating_after"], vals["penetrating_before"],
         vals["penetrating_after"] <= vals["penetrating_before"]),
    ]


def cmd_demo(args) -> int:
    cfg = _resolve(args, {})
    out = _out_dir(args.out_dir)
    cfgmod.write_snapshot(cfg, out)
    checks = run_demo(cfg, out)
    with open(out / "checks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "value", "threshold", "passed"])
        for name, value, thr, ok in checks:
            w.writerow([name, repr(float(value)), repr(float(thr)), "pass" if ok else "fail"])
    for name, value, thr, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} = {value:.6g} (threshold {thr:.6g})")
    return 0 if all(c[3] for c in checks) else 1


# ------------------------------------------------------------------ parser


def _guidance_flags(p):
    p.add_argument("--guidance", choices=("mock", "remote"), help="guidance backend")
    p.add_argument("--guidance-url", help="noise-prediction service base URL")
    p.add_argument("--guidance-timeout-ms", type=int)
    p.add_argument("--gender", help="gender word for prompts")
    p.add_argument("--object-name", help="object name for prompts")
    p.add_argument("--resolution", type=int, help="tet grid resolution")
    p.add_argument("--pose-set", nargs="*", default=(), help="extra canonicalization pose files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layercut", description="Layered decomposition of clothed-human scans.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)
        return p

    p = add("lift", cmd_lift, "lift per-view object masks onto scan faces")
    p.add_argument("--scan", required=True)
    p.add_argument("--views", required=True, help="JSON view manifest")
    p.add_argument("--out", required=True, help="label file to write")
    p.add_argument("--min-votes", type=int)

    p = add("decompose", cmd_decompose, "optimize human and object geometry")
    for flag in ("--scan", "--labels", "--rig", "--pose", "--out-dir"):
        p.add_argument(flag, required=True)
    _guidance_flags(p)
    p.add_argument("--init-steps", type=int)
    p.add_argument("--geo-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = add("texture", cmd_texture, "optimize per-vertex colors of both layers")
    for flag in ("--human", "--object", "--scan", "--labels", "--rig", "--pose", "--out-dir"):
        p.add_argument(flag, required=True)
    _guidance_flags(p)
    p.add_argument("--tex-steps", type=int)

    p = add("compose", cmd_compose, "put an object layer on a human layer and pose the result")
    for flag in ("--object", "--human", "--rig", "--pose", "--out-dir"):
        p.add_argument(flag, required=True)
    p.add_argument("--refine", action="store_true")
    p.add_argument("--lambda-dis", type=float)

    p = add("refine", cmd_refine, "push a human layer inside an object layer")
    for flag in ("--human", "--object", "--out-dir"):
        p.add_argument(flag, required=True)
    p.add_argument("--lambda-dis", type=float)
    p.add_argument("--steps", type=int)

    p = add("eval", cmd_eval, "Chamfer / IoU / POR metrics to CSV")
    for name in ("human", "object"):
        p.add_argument(f"--pred-{name}")
        p.add_argument(f"--gt-{name}")
    p.add_argument("--por-input")
    p.add_argument("--por-edited")
    p.add_argument("--samples", type=int)
    p.add_argument("--iou-resolution", type=int)
    p.add_argument("--out-dir", required=True)

    p = add("render", cmd_render, "render buffers from orbit cameras")
    p.add_argument("--mesh", required=True)
    p.add_argument("--labels")
    p.add_argument("--views", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out-dir", required=True)

    p = add("demo-synthetic", cmd_demo, "full pipeline on the synthetic scene with the mock oracle")
    p.add_argument("--out-dir", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except LayercutError as exc:
        print(f"layercut: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"layercut: io error: {exc}", file=sys.stderr)
        return AssetError.exit_code
    except ValueError as exc:
        print(f"layercut: {exc}", file=sys.stderr)
        return LayercutError.exit_code


if __name__ == "__main__":
    sys.exit(main())
