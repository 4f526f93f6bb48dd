"""Command-line entry point: ``boxvid <command> ...``.

Every command accepts ``--config FILE``: a JSON object whose keys are the
command's long option names (dashes or underscores). File values replace
built-in defaults; flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import annotations as ann
from . import detection_eval as de
from . import edm
from . import masks
from . import motion_tokens as mt
from . import renderer
from . import video_metrics as vm

DEFAULT_SEED = 20240
FRAME_PATTERN = "frame_{:02d}.png"


class CliError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --- input helpers ------------------------------------------------------------

def load_clip(path: Path, args) -> ann.ClipAnnotation:
    text = path.read_text()
    if args.format == "kitti" or (args.format == "auto" and path.suffix == ".txt"):
        calib = Path(args.calib).read_text() if getattr(args, "calib", None) else None
        clip = ann.parse_kitti_tracking(text, calib, width=args.source_width or 1242,
                                        height=args.source_height or 375, fps=args.fps)
    else:
        clip = ann.parse_generic_jsonl(text, width=args.source_width or args.width,
                                       height=args.source_height or args.height, fps=args.fps)
    if getattr(args, "length", None):
        clip = ann.window_clip(clip, args.start, args.length)
    if (clip.width, clip.height) != (args.width, args.height):
        sx, sy = args.width / clip.width, args.height / clip.height
        calib = clip.calib.scaled(sx, sy) if clip.calib is not None else None
        clip = ann.rescale_annotation(clip, args.width, args.height)
        clip = ann.ClipAnnotation(clip.width, clip.height, clip.fps, clip.frames, calib)
    return clip


def _render_config(args) -> renderer.RenderConfig:
    return renderer.RenderConfig(seed=args.seed, fill_alpha=args.fill_alpha,
                                 outline_width=args.outline_width, x_mark_width=args.x_mark_width)


def write_frames(frames: Sequence[renderer.Rgb8Frame], out_dir: Path) -> list[dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(frames):
        data = frame.to_png()
        name = FRAME_PATTERN.format(i)
        (out_dir / name).write_bytes(data)
        entries.append({"file": name, "sha256": hashlib.sha256(data).hexdigest()})
    return entries


def discover_clips(root: Path) -> dict[str, list[Path]]:
    """Map clip id to its sorted frame files.

    A directory holding ``frame_*.png`` directly is one clip named after the
    directory; otherwise each subdirectory with frames is a clip.
    """
    own = sorted(root.glob("frame_*.png"))
    if own:
        return {root.name: own}
    clips = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(sub.glob("frame_*.png"))
        if frames:
            clips[sub.name] = frames
    if not clips:
        raise CliError(f"no frame_*.png files under {root}")
    return clips


def paired_clips(pred_root: Path, gt_root: Path) -> list[tuple[str, list[Path], list[Path]]]:
    preds, gts = discover_clips(pred_root), discover_clips(gt_root)
    if len(preds) == 1 and len(gts) == 1:
        (pid, pf), (gid, gf) = next(iter(preds.items())), next(iter(gts.items()))
        preds, gts = {gid: pf}, {gid: gf}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise CliError(f"predicted clips missing: {', '.join(missing)}")
    out = []
    for cid, gt_files in gts.items():
        pred_files = preds[cid]
        pred_names = {p.name for p in pred_files}
        gt_names = {p.name for p in gt_files}
        for name in sorted(gt_names ^ pred_names):
            side = "prediction" if name not in pred_names else "ground truth"
            raise CliError(f"clip {cid}: frame {name} missing from {side}")
        out.append((cid, pred_files, gt_files))
    return out


# --- commands -----------------------------------------------------------------

def cmd_render(args) -> int:
    out = Path(args.out)
    inputs = [Path(p) for p in args.annotations]
    config = _render_config(args)

    def work(path: Path):
        clip = load_clip(path, args)
        frames = renderer.render_clip(clip, args.mode, config=config, require_3d=args.require_3d)
        target = out if len(inputs) == 1 else out / path.stem
        return path.stem, write_frames(frames, target)

    results = _pmap(work, inputs, args.jobs)
    manifest = {
        "config": {"mode": args.mode, "seed": args.seed, "fill_alpha": args.fill_alpha,
                   "outline_width": args.outline_width, "x_mark_width": args.x_mark_width,
                   "width": args.width, "height": args.height},
        "clips": {name: frames for name, frames in results},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"rendered {sum(len(f) for _, f in results)} frames to {out}")
    return 0


def _load_frames(paths: Sequence[Path]) -> list[renderer.Rgb8Frame]:
    return [renderer.Rgb8Frame.from_png(p) for p in paths]


def cmd_mask_metrics(args) -> int:
    pairs = paired_clips(Path(args.pred_dir), Path(args.gt_dir))

    def work(item):
        cid, pf, gf = item
        return cid, masks.score_clip(_load_frames(pf), _load_frames(gf), pred_is_generated=args.generated)

    rows = _pmap(work, pairs, args.jobs)
    text = masks.report_csv(rows)
    _emit(text, args.out)
    return 0


def cmd_quality(args) -> int:
    pairs = paired_clips(Path(args.pred_dir), Path(args.gt_dir))
    eval_size = None if args.native else tuple(args.eval_size)

    def work(item):
        cid, pf, gf = item
        return cid, vm.clip_quality(_load_frames(pf), _load_frames(gf), eval_size)

    rows = _pmap(work, pairs, args.jobs)
    lines = ["clip_id,psnr_mean,psnr_inf_count,ssim_mean"]
    for cid, q in rows:
        psnr = "inf" if math.isinf(q.psnr_mean) else f"{q.psnr_mean:.4f}"
        lines.append(f"{cid},{psnr},{q.psnr_inf_count},{q.ssim_mean:.6f}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _load_detections(pred_path: str, ref_path: str, dataset: Optional[str], cutoff: float):
    try:
        preds = de.load_detection_file(Path(pred_path).read_text())
        refs = de.load_detection_file(Path(ref_path).read_text())
    except json.JSONDecodeError as exc:
        raise de.DetectionError(f"invalid JSON: {exc}") from None
    if dataset:
        preds = [de.map_detection_classes(p, dataset) for p in preds]
        refs = [de.map_detection_classes(r, dataset) for r in refs]
    refs = [de.filter_gt_detections(r, cutoff) for r in refs]
    return preds, refs


def cmd_ap(args) -> int:
    preds, refs = _load_detections(args.pred_json, args.ref_json, args.dataset, args.gt_cutoff)
    pooled_p, pooled_r = de.pool_clips(preds, refs)
    report = de.evaluate_coco(pooled_p, pooled_r)
    pred_by_id = {p.clip_id: p for p in preds}
    per_clip = {r.clip_id: de.evaluate_coco(pred_by_id[r.clip_id].detections, r.detections).as_dict()
                for r in refs}
    print(de.format_table_row(args.dataset or "all", report))
    doc = {"dataset": args.dataset, "gt_cutoff": args.gt_cutoff, "overall": report.as_dict(), "per_clip": per_clip}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
    for thr in args.pr_curve or []:
        curve = de.pr_curve(pooled_p, pooled_r, thr)
        dest = Path(args.out).parent if args.out else Path(".")
        (dest / f"pr_curve_iou{round(thr * 100):02d}.csv").write_text(curve.to_csv())
    return 0


def cmd_pr_curve(args) -> int:
    preds, refs = _load_detections(args.pred_json, args.ref_json, args.dataset, args.gt_cutoff)
    pooled_p, pooled_r = de.pool_clips(preds, refs)
    _emit(de.pr_curve(pooled_p, pooled_r, args.iou).to_csv(), args.out)
    return 0


def cmd_tokenize(args) -> int:
    clip = load_clip(Path(args.annotations), args)
    _emit(mt.trajectories_to_jsonl(mt.tokenize_clip(clip)), args.out)
    return 0


def cmd_rollout(args) -> int:
    trajs = mt.trajectories_from_jsonl(Path(args.tokens).read_text())
    n = args.frames or 1 + max((t.presence[1] for t in trajs), default=-1)
    clip = mt.rollout_clip(trajs, n, args.width, args.height, args.fps)
    _emit(ann.clip_to_jsonl(clip), args.out)
    return 0


def cmd_traj(args) -> int:
    if not args.conditioning:
        raise CliError("--conditioning annotation file is required")
    clip = load_clip(Path(args.conditioning), args)
    n = args.frames or len(clip.frames)
    m = args.n_initial
    if len(clip.frames) < m + 1:
        raise CliError(f"conditioning file has {len(clip.frames)} frames; need {m} initial plus a final frame")
    first, last = clip.frames[:m], clip.frames[-1]
    config = _render_config(args)
    if args.generator == "interp":
        candidates = [mt.interpolate_baseline(first, last, n, clip.width, clip.height, clip.fps)]
    else:
        if args.model:
            model = mt.MarkovModel.from_json(json.loads(Path(args.model).read_text()))
        elif args.corpus:
            model = mt.markov_fit(mt.trajectories_from_jsonl(Path(args.corpus).read_text()))
        else:
            model = mt.markov_fit(mt.tokenize_clip(clip))
        candidates = mt.markov_sample(model, first, last, n, args.temperature, args.seed, args.k,
                                      clip.width, clip.height, clip.fps)
    reference = clip if len(clip.frames) == n else _conditioning_only(first, last, n, clip)
    ref_frames = renderer.render_clip(reference, "bbox", config=config)
    rendered = [renderer.render_clip(c, "bbox", config=config) for c in candidates]
    index, report = mt.best_of_k(rendered, ref_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chosen = candidates[index]
    (out / "clip.jsonl").write_text(ann.clip_to_jsonl(chosen))
    frames = renderer.render_clip(chosen, args.mode, config=config)
    entries = write_frames(frames, out / "frames")
    selection = {"generator": args.generator, "k": len(candidates), "seed": args.seed,
                 "selected": index, "scores": report.as_dict(), "frames": entries}
    (out / "selection.json").write_text(json.dumps(selection, indent=1, sort_keys=True))
    print(json.dumps({"selected": index, "maskIoU": report.maskIoU}))
    return 0


def _conditioning_only(first, last, n, clip) -> ann.ClipAnnotation:
    frames = [list(f.objects) for f in first] + [[] for _ in range(n - len(first) - 1)] + [list(last.objects)]
    return ann.ClipAnnotation(clip.width, clip.height, clip.fps, ann.frames_from_objects(frames))


def cmd_edm_demo(args) -> int:
    report = edm.demo_report(args.steps, args.samples, args.seed, args.sigma_min, args.sigma_max, args.rho)
    s1 = 1.0
    report["lambdas_at_sigma_1"] = {"skip": edm.lambda_skip(s1), "out": edm.lambda_out(s1),
                                    "in": edm.lambda_in(s1), "noise": edm.lambda_noise(s1)}
    print(json.dumps(report))
    return 0


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- parser -------------------------------------------------------------------

def _add_clip_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("auto", "jsonl", "kitti"), default="auto")
    p.add_argument("--calib", help="KITTI calibration file (needed for 3D wireframes)")
    p.add_argument("--source-width", type=int, help="image width the annotation coordinates refer to")
    p.add_argument("--source-height", type=int)
    p.add_argument("--width", type=int, default=ann.DEFAULT_WIDTH, help="output width")
    p.add_argument("--height", type=int, default=ann.DEFAULT_HEIGHT, help="output height")
    p.add_argument("--fps", type=float, default=ann.DEFAULT_FPS)
    p.add_argument("--start", type=int, default=0, help="first frame of the window")
    p.add_argument("--length", type=int, help="window length (default: whole sequence)")


def _add_render_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--fill-alpha", type=float, default=0.25)
    p.add_argument("--outline-width", type=float, default=2.0)
    p.add_argument("--x-mark-width", type=float, default=2.0)
    p.add_argument("--mode", choices=renderer.MODES, default="bbox")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxvid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=fn)
        return p

    p = command("render", cmd_render, "render annotation clips to PNG frames")
    p.add_argument("annotations", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--require-3d", action="store_true")
    _add_clip_options(p)
    _add_render_options(p)

    p = command("mask-metrics", cmd_mask_metrics, "maskIoU/maskP/maskR of predicted vs ground-truth frames")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--generated", action=argparse.BooleanOptionalAction, default=True,
                   help="treat predictions as generated frames (dark pixels count as background)")
    p.add_argument("--out")
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = command("quality", cmd_quality, "PSNR and SSIM of predicted vs ground-truth frames")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--eval-size", type=int, nargs=2, default=list(vm.EVAL_SIZE), metavar=("H", "W"))
    p.add_argument("--native", action="store_true", help="skip resizing to the evaluation size")
    p.add_argument("--out")
    p.add_argument("--jobs", type=_positive_int, default=1)

    for name, fn in (("ap", cmd_ap), ("pr-curve", cmd_pr_curve)):
        p = command(name, fn, "COCO-style AP of detections" if name == "ap" else "precision-recall curve")
        p.add_argument("pred_json")
        p.add_argument("ref_json")
        p.add_argument("--dataset", choices=de.DATASETS)
        p.add_argument("--gt-cutoff", type=float, default=de.GT_CONFIDENCE_CUTOFF)
        p.add_argument("--out")
        if name == "ap":
            p.add_argument("--pr-curve", type=float, action="append", metavar="IOU")
        else:
            p.add_argument("--iou", type=float, default=0.5)

    p = command("tokenize", cmd_tokenize, "annotation clip to motion-token corpus")
    p.add_argument("annotations")
    p.add_argument("--out")
    _add_clip_options(p)

    p = command("rollout", cmd_rollout, "motion-token corpus back to an annotation clip")
    p.add_argument("tokens")
    p.add_argument("--frames", type=int)
    p.add_argument("--width", type=int, default=ann.DEFAULT_WIDTH)
    p.add_argument("--height", type=int, default=ann.DEFAULT_HEIGHT)
    p.add_argument("--fps", type=float, default=ann.DEFAULT_FPS)
    p.add_argument("--out")

    p = command("traj", cmd_traj, "generate a box trajectory clip from conditioning frames")
    p.add_argument("--conditioning", help="annotation clip: the first frames and the last frame condition")
    p.add_argument("--n-initial", type=int, choices=(1, 3), default=1)
    p.add_argument("--frames", type=int, help="clip length (default: conditioning file length)")
    p.add_argument("--generator", choices=("interp", "markov"), default="interp")
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--model", help="transition model JSON")
    p.add_argument("--corpus", help="token corpus JSONL to fit the transition model on")
    p.add_argument("--out", required=True)
    _add_clip_options(p)
    _add_render_options(p)

    p = command("edm-demo", cmd_edm_demo, "EDM schedule and Gaussian-target sampling statistics")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-min", type=float, default=0.002)
    p.add_argument("--sigma-max", type=float, default=80.0)
    p.add_argument("--rho", type=float, default=7.0)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    doc = json.loads(Path(args.config).read_text())
    if not isinstance(doc, dict):
        raise CliError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    overrides = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise CliError(f"unknown config key {key!r} for command {args.command}")
        overrides[dest] = value
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
