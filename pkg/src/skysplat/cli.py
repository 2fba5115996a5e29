"""Pipeline command line: one subcommand per stage plus an end-to-end runner.

Every stage validates its upstream artifacts, exits 2 with the failing
invariant named on validation errors, and logs structured JSON lines to
stderr. Stage outputs are content-addressed by the scene config hash, so
rerunning an unchanged stage is a no-op.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline, report
from .background import BackgroundMesh
from .config import CONF_PERCENTILE_PRESETS
from .errors import PipelineError
from .fixtures import corrupt_track, generate_scene
from .tensor_io import write_tensor
from .trainer import (SceneState, edit_scene, evaluate, init_state,
                      render_frame, train, train_test_split)


def _log(stage: str, **fields):
    rec = {"stage": stage, "time": round(time.time(), 3)}
    rec.update(fields)
    print(json.dumps(rec), file=sys.stderr)


def _fail(stage: str, exc: Exception) -> int:
    _log(stage, error=type(exc).__name__, detail=str(exc))
    return 2


def _scene(args) -> pipeline.SceneData:
    scene = pipeline.load_scene(args.manifest)
    if getattr(args, "config", None):
        import json as _json
        overrides = _json.loads(Path(args.config).read_text())
        merged = scene.cfg.to_dict()
        for section, values in overrides.items():
            merged.setdefault(section, {}).update(values)
        scene.cfg = type(scene.cfg).from_dict(merged)
    if getattr(args, "preset", None):
        scene.cfg.apply_preset(args.preset)
    if getattr(args, "iters", None):
        scene.cfg.optim.iterations = args.iters
    return scene


def _workdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_fixture(args) -> int:
    manifest = generate_scene(
        args.out, seed=args.seed, n_frames=args.frames, n_people=args.people,
        true_scale=args.true_scale, altitude=args.altitude, noise=args.noise,
        width=args.width, height=args.height)
    if args.corrupt:
        frame, person, mode = args.corrupt.split(":")
        corrupt_track(manifest, int(frame), int(person), mode)
    _log("gen-fixture", manifest=str(manifest))
    print(manifest)
    return 0


def cmd_refine(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    cfg_hash = scene.cfg.hash()
    if pipeline.stage_is_fresh(out, "refine", cfg_hash) \
            and (out / "refined_tracks.json").exists():
        _log("refine", skipped=True)
        return 0
    refined = pipeline.stage_refine(scene, out)
    pipeline.mark_stage(out, "refine", cfg_hash)
    n = sum(len(t) for t in refined.values())
    _log("refine", tracks=len(refined), frames=n)
    return 0


def cmd_recon_bg(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    cfg_hash = scene.cfg.hash()
    if pipeline.stage_is_fresh(out, "recon", cfg_hash) \
            and (out / "mesh" / "vertices.t").exists():
        _log("recon-bg", skipped=True)
        return 0
    mesh = pipeline.stage_recon(scene, out)
    if args.ply:
        mesh.export_ply(out / "mesh.ply")
    pipeline.mark_stage(out, "recon", cfg_hash)
    _log("recon-bg", vertices=len(mesh.vertices), faces=len(mesh.faces))
    return 0


def cmd_scale(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    cfg_hash = scene.cfg.hash()
    if pipeline.stage_is_fresh(out, "scale", cfg_hash) \
            and (out / "scale.json").exists():
        _log("scale", skipped=True)
        return 0
    refined = _need_refined(scene, out)
    rep = pipeline.stage_scale(scene, refined, out)
    report.save_scale_figures(rep, out)
    pipeline.mark_stage(out, "scale", cfg_hash)
    _log("scale", sigma=rep["sigma"], samples=rep["n_samples"],
         dropped=rep["n_dropped"])
    return 0


def cmd_place(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    cfg_hash = scene.cfg.hash()
    if pipeline.stage_is_fresh(out, "place", cfg_hash) \
            and (out / "placement.json").exists():
        _log("place", skipped=True)
        return 0
    refined = _need_refined(scene, out)
    mesh = _need_mesh(out)
    sigma = _need_sigma(out)
    data = pipeline.stage_place(scene, refined, mesh, sigma, out)
    pipeline.mark_stage(out, "place", cfg_hash)
    n = sum(len(r) for r in data["roots"].values())
    _log("place", placed=n, sigma=sigma)
    return 0


def _need_refined(scene, out: Path):
    path = out / "refined_tracks.json"
    if not path.exists():
        pipeline.stage_refine(scene, out)
    return pipeline.load_refined(path)


def _need_mesh(out: Path) -> BackgroundMesh:
    mesh_dir = out / "mesh"
    if not (mesh_dir / "vertices.t").exists():
        raise PipelineError("background mesh missing; run recon-bg first")
    return BackgroundMesh.load(mesh_dir)


def _need_sigma(out: Path) -> float:
    path = out / "scale.json"
    if not path.exists():
        raise PipelineError("scale result missing; run scale first")
    return float(json.loads(path.read_text())["sigma"])


def _need_placement(out: Path) -> dict:
    path = out / "placement.json"
    if not path.exists():
        raise PipelineError("placement missing; run place first")
    return pipeline.load_placement(path)


def cmd_train(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    refined = _need_refined(scene, out)
    sigma = _need_sigma(out)
    placement = _need_placement(out)
    state = init_state(scene, refined, placement, sigma,
                       include_humans=not args.no_humans)
    iters = args.iters or scene.cfg.optim.iterations
    log = train(state, scene, iters, workdir=out, seed=args.seed)
    report.save_train_figure(log.rows, out)
    ck = out / ("checkpoint" if not args.no_humans else "checkpoint_bg_only")
    state.save(ck)
    _log("train", iterations=iters, checkpoint=str(ck),
         gaussians=len(state.bg) + sum(len(h) for h in state.humans.values()))
    return 0


def cmd_render(args) -> int:
    from PIL import Image
    scene = _scene(args)
    out = _workdir(args)
    state = SceneState.load(args.checkpoint or (out / "checkpoint"))
    frames = ([args.frame] if args.frame is not None
              else list(range(scene.n_frames)))
    rdir = out / "renders"
    rdir.mkdir(parents=True, exist_ok=True)
    for t in frames:
        res = render_frame(state, scene, int(t))
        img = np.clip(np.rint(res.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(rdir / f"f{int(t):04d}.png")
    _log("render", frames=len(frames), out=str(rdir))
    return 0


def cmd_eval(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    state = SceneState.load(args.checkpoint or (out / "checkpoint"))
    metrics = evaluate(state, scene, split=args.split)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    with open(out / "metrics.csv", "w") as fh:
        fh.write("frame,psnr,ssim,psnr_human,ssim_human\n")
        for r in metrics["frames"]:
            fh.write(f"{r['frame']},{r['psnr']:.4f},{r['ssim']:.6f},"
                     f"{r.get('psnr_human', '')},{r.get('ssim_human', '')}\n")
    report.save_eval_figure(metrics, out)
    _log("eval", split=args.split, mean_psnr=metrics["mean_psnr"],
         mean_ssim=metrics["mean_ssim"],
         mean_psnr_human=metrics["mean_psnr_human"])
    print(json.dumps({k: v for k, v in metrics.items() if k != "frames"}))
    return 0


def cmd_edit(args) -> int:
    scene = _scene(args)
    out = _workdir(args)
    state = SceneState.load(args.checkpoint or (out / "checkpoint"))
    edits = json.loads(args.edits)
    if isinstance(edits, dict):
        edits = [edits]
    new_state = edit_scene(state, edits)
    ck = out / "checkpoint_edited"
    new_state.save(ck)
    _log("edit", edits=len(edits), checkpoint=str(ck))
    return 0


def cmd_run_all(args) -> int:
    t0 = time.time()
    for fn in (cmd_refine, cmd_recon_bg, cmd_scale, cmd_place, cmd_train):
        rc = fn(args)
        if rc != 0:
            return rc
    rc = cmd_eval(args)
    _log("run-all", seconds=round(time.time() - t0, 1))
    return rc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="skysplat",
        description="Dynamic Gaussian-splat reconstruction of aerial scenes")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON config override file")
        p.add_argument("--preset", choices=sorted(CONF_PERCENTILE_PRESETS),
                       help="dataset confidence-percentile preset")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("U4D_THREADS", "0")))
        p.add_argument("--iters", type=int)

    p = sub.add_parser("gen-fixture", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--people", type=int, default=3)
    p.add_argument("--true-scale", type=float, default=40.0)
    p.add_argument("--altitude", type=float, default=45.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--corrupt", help="frame:person:mode corruption")
    p.set_defaults(func=cmd_gen_fixture)

    for name, fn in [("refine", cmd_refine), ("scale", cmd_scale),
                     ("place", cmd_place), ("train", cmd_train),
                     ("render", cmd_render), ("eval", cmd_eval),
                     ("edit", cmd_edit), ("run-all", cmd_run_all)]:
        p = sub.add_parser(name)
        common(p)
        if name in ("train", "run-all"):
            p.add_argument("--no-humans", action="store_true",
                           help="background-only ablation")
        if name in ("render", "eval", "edit"):
            p.add_argument("--checkpoint")
        if name == "render":
            p.add_argument("--frame", type=int)
        if name == "eval":
            p.add_argument("--split", choices=["test", "train", "all"],
                           default="test")
        if name == "edit":
            p.add_argument("--edits", required=True,
                           help='JSON list, e.g. [{"op":"remove","person":0}]')
        p.set_defaults(func=fn)

    p = sub.add_parser("recon-bg")
    common(p)
    p.add_argument("--ply", action="store_true", help="also export mesh.ply")
    p.set_defaults(func=cmd_recon_bg)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 0):
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        return args.func(args)
    except PipelineError as exc:
        return _fail(args.command, exc)
    except (ValueError, FileNotFoundError) as exc:
        return _fail(args.command, exc)


if __name__ == "__main__":
    sys.exit(main())
