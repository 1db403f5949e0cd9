"""Command-line driver: ``splat4d <command> ...``.

Commands::

    synth          write a synthetic dataset (frames, cameras, manifest)
    fit-canonical  warm-up and per-frame deformation stages -> checkpoint
    fit-motion     motion fit, frozen-canonical growth, joint fine-tune -> checkpoint
    render         PNG frames of a checkpoint at given cameras and times
    export-ply     the cloud of a checkpoint at time t as a PLY file
    eval           PSNR/SSIM report comparing two directories of PNGs

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .camera import read_cameras
from .config import RunConfig, apply_overrides
from .metrics import eval_report, report_json
from .oracle import SceneSpec, gen_scene, load_dataset, render_dataset, scene_from_manifest, sfm_points, write_dataset
from .rasterizer import load_png, render, save_png
from .scene import write_ply
from .trainer import (Trainer, deformed_cloud, init_cloud, load_checkpoint, make_denoiser, named_rng,
                      resume_trainer)

log = logging.getLogger("splat4d")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
CHECKPOINT = "checkpoint.npz"
METRICS = "metrics.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for numerical failures
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    """Config file (or ``base``), then flags; flags win."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else getattr(args, "base_config", RunConfig())
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "scale", None) is not None:
        over["plan.scale"] = args.scale
    if getattr(args, "denoiser", None) is not None:
        over["denoiser"] = args.denoiser
    for flag, key in (("no_perframe_deformation", "perframe_deformation"), ("no_small_motion", "small_motion"),
                      ("no_sds", "sds"), ("no_freeze_video", "freeze_video")):
        if getattr(args, flag, False):
            over[f"ablation.{key}"] = False
    return apply_overrides(cfg, over) if over else cfg


def _prepare_out(out: Path, force: bool, resume: bool = False) -> None:
    if out.exists() and any(out.iterdir()) and not (force or resume):
        raise UsageError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, command: str, cfg: RunConfig, **extra) -> None:
    data = {"command": command, "config": cfg.to_dict(), **extra}
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _denoiser(cfg: RunConfig, gt_scene):
    den = make_denoiser(cfg.denoiser, cfg) if cfg.sds_enabled else None
    if cfg.denoiser == "gt" and gt_scene is None:
        raise UsageError("the gt denoiser needs a synthetic dataset whose manifest can regenerate the scene")
    return den


def _gt_scene(ds):
    try:
        return scene_from_manifest(ds.manifest)
    except (KeyError, TypeError):
        return None


def _progress(every: int):
    def cb(trainer, rec):
        if every and trainer.state.iteration % every == 0:
            log.info("iter %d %s loss %.5f splats %d", rec["iter"], rec["stage"], rec["loss_total"], rec["n_splats"])
    return cb


def _times(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --times {text!r}") from exc


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    cfg = _config(args)
    fields = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for name in ("n_splats", "n_clusters", "jitter", "height", "width", "n_times"):
        v = getattr(args, name)
        if v is not None:
            fields[name] = v
    try:
        spec = SceneSpec(**fields)
    except TypeError as exc:
        raise UsageError(f"bad scene spec: {exc}") from exc
    ds = render_dataset(gen_scene(spec, cfg.seed))
    write_dataset(ds, out, {"config": cfg.to_dict()})
    log.info("wrote %d freeze, %d held-out, %d reference frames to %s", ds.num_freeze, len(ds.heldout_frames),
             len(ds.reference_frames), out)
    return EXIT_OK


def _fit(args, phase: str) -> int:
    out = Path(args.out)
    ckpt = out / CHECKPOINT
    resume = args.resume and ckpt.exists()
    _config(args)  # fail on bad flags before touching the output directory
    ds = load_dataset(args.dataset)
    _prepare_out(out, args.force, resume)
    if args.force and not resume:
        (out / METRICS).unlink(missing_ok=True)
    gt = _gt_scene(ds)
    if resume:
        src = ckpt
    elif phase == "motion":
        src = Path(args.canonical)
        if src.is_dir():
            src = src / CHECKPOINT
    else:
        src = None
    if src is not None:
        _, meta = load_checkpoint(src)
        args.base_config = RunConfig.from_dict(meta["config"])
        cfg = _config(args)
        tr = resume_trainer(src, ds, cfg, gt_scene=gt)
    else:
        cfg = _config(args)
        if gt is None:
            raise UsageError("fit-canonical needs a dataset written by 'synth' (its manifest seeds the point cloud)")
        pts, cols = sfm_points(gt, ds, named_rng(cfg.seed, "sfm"), noise=cfg.init.sfm_noise)
        tr = Trainer(ds, cfg, init_cloud(pts, cols, cfg.init.opacity), gt_scene=gt)
    tr.denoiser = _denoiser(cfg, gt)
    until = tr.plan.canonical_end if phase == "canonical" else tr.plan.total
    if tr.state.iteration > until:
        raise UsageError(f"checkpoint is at iteration {tr.state.iteration}, past the end of this phase ({until})")
    _write_manifest(out, f"fit-{phase}", cfg, dataset=str(Path(args.dataset).resolve()))
    try:
        tr.run(until, out / METRICS, ckpt, cfg.checkpoint_every, _progress(args.log_every))
    finally:
        if hasattr(tr.denoiser, "close"):
            tr.denoiser.close()
    write_ply(tr.state.cloud, out / "canonical.ply")
    summary = {"iteration": tr.state.iteration, "n_splats": tr.state.cloud.n}
    if phase == "canonical" and len(ds.heldout_frames):
        summary["heldout_psnr"] = tr.heldout_psnr()
        summary["mean_perframe_offset"] = tr.mean_perframe_offset()
    if phase == "motion":
        summary["reference_psnr"] = tr.reference_psnr()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%s", json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_fit_canonical(args) -> int:
    return _fit(args, "canonical")


def cmd_fit_motion(args) -> int:
    return _fit(args, "motion")


def _load_state(path: str):
    p = Path(path)
    state, meta = load_checkpoint(p / CHECKPOINT if p.is_dir() else p)
    return state, meta


def cmd_render(args) -> int:
    state, meta = _load_state(args.checkpoint)
    bg = np.asarray(meta.get("background", (0.0, 0.0, 0.0)))
    indices, poses = read_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ti, t in enumerate(_times(args.times)):
        cloud = deformed_cloud(state, t)
        for idx, pose in zip(indices, poses):
            save_png(out / f"c{idx:03d}_t{ti:03d}.png", render(cloud, pose, bg).pixels)
    return EXIT_OK


def cmd_export_ply(args) -> int:
    state, _ = _load_state(args.checkpoint)
    write_ply(deformed_cloud(state, args.time), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    rdir, tdir = Path(args.renders), Path(args.targets)
    names = sorted(p.name for p in rdir.glob("*.png"))
    if not names:
        raise UsageError(f"no PNG files in {rdir}")
    missing = [n for n in names if not (tdir / n).exists()]
    if missing:
        raise UsageError(f"targets missing for {missing[:3]}")
    renders = np.stack([load_png(rdir / n) for n in names])
    targets = np.stack([load_png(tdir / n) for n in names])
    text = report_json(eval_report(renders, targets, [Path(n).stem for n in names]))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=float, help="stage-plan scale (1.0 is the full schedule)")
    p.add_argument("--no-perframe-deformation", action="store_true")
    p.add_argument("--no-small-motion", action="store_true")
    p.add_argument("--no-sds", action="store_true")
    p.add_argument("--no-freeze-video", action="store_true", help="train on the canonical freeze frame only")
    p.add_argument("--denoiser", help="none | gt | identity | blur | remote:<address>")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="splat4d", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("out")
    _add_run_flags(p)
    p.add_argument("--spec", help="JSON object of scene fields (n_splats, n_freeze, focal, ...); flags override it")
    p.add_argument("--jitter", type=float, help="freeze-time perturbation amplitude, fraction of scene extent")
    p.add_argument("--n-splats", type=int)
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--n-times", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("fit-canonical", cmd_fit_canonical, "canonical reconstruction"),
                              ("fit-motion", cmd_fit_motion, "temporal deformation fitting")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("dataset")
        if name == "fit-motion":
            p.add_argument("canonical", help="fit-canonical output directory or checkpoint")
        p.add_argument("out")
        _add_run_flags(p)
        p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz if present")
        p.add_argument("--log-every", type=int, default=100)
        p.set_defaults(func=func)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--cameras", required=True, help="camera file (same format as the dataset's)")
    p.add_argument("--times", default="0", help="comma-separated times in [0, 1]")
    p.add_argument("out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-ply", help="export the cloud at time t")
    p.add_argument("checkpoint")
    p.add_argument("--time", type=float, default=0.0)
    p.add_argument("out")
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("eval", help="PSNR/SSIM of renders against targets (matched by file name)")
    p.add_argument("renders")
    p.add_argument("targets")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"splat4d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"splat4d: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        if "collapsed" in str(exc):
            print(f"splat4d: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"splat4d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError, OSError, KeyError) as exc:
        print(f"splat4d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
