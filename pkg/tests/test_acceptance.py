"""Acceptance criteria, one test each, with the stated tolerances and time limits.

Each test records a ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary (and to stdout when run with ``-s``).
"""

from __future__ import annotations

import math
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from boxvid import cli
from boxvid.annotations import Box2D, ClipAnnotation, FrameAnnotation, ObjectState, clip_to_jsonl
from boxvid.detection_eval import IOU_THRESHOLDS, Detection, average_precision, evaluate_coco, map_class_to_coco
from boxvid.edm import euler_sample, gaussian_denoiser, karras_schedule, lambda_in, lambda_noise, lambda_out, lambda_skip
from boxvid.masks import BinaryMask, MaskScoreReport, mask_iou, mask_precision, mask_recall, score_clip
from boxvid.motion_tokens import (
    VOCAB_SIZE, ActionToken, dequantize, interpolate_baseline, quantization_bound, quantize_displacement,
)
from boxvid.renderer import RenderConfig, Rgb8Frame, render_clip
from boxvid.video_metrics import SsimConfig, luminance, psnr, ssim
from oracles import brute_force_nonblack, oracle_ap

TESTS_DIR = Path(__file__).resolve().parent
_CHILD_FLAG = "BOXVID_TIMED_SUITE"


@contextmanager
def criterion(log, number, name, limit_s=None):
    """Run a criterion body, record PASS/FAIL with timing, and re-raise failures."""
    notes: list[str] = []
    t0 = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - t0
        if limit_s is not None:
            assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        line = f"criterion {number}: FAIL {name} ({elapsed:.2f}s) {' '.join(notes)} :: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}"
        log(line)
        print(line)
        raise
    line = f"criterion {number}: PASS {name} ({elapsed:.2f}s) {' '.join(notes)}".rstrip()
    log(line)
    print(line)


# 1 -----------------------------------------------------------------------------

def test_criterion_01_edm_identities(criterion_log):
    with criterion(criterion_log, 1, "scaling-function identities", 1.0) as notes:
        grid = np.logspace(-3, 3, 1000)
        d1 = max(abs(lambda_skip(s) - lambda_in(s) ** 2) for s in grid)
        d2 = max(abs(lambda_skip(s) + lambda_out(s) ** 2 - 1) for s in grid)
        d3 = abs(lambda_noise(math.exp(4.0)) - 1.0)
        notes.append(f"max|skip-in^2|={d1:.1e} max|skip+out^2-1|={d2:.1e} |noise(e^4)-1|={d3:.1e}")
        assert d1 < 1e-12 and d2 < 1e-12 and d3 <= 1e-15


# 2 -----------------------------------------------------------------------------

def test_criterion_02_gaussian_sampler(criterion_log):
    with criterion(criterion_log, 2, "Euler sampler on N(0,1) target", 5.0) as notes:
        out = euler_sample(gaussian_denoiser(1.0), karras_schedule(50), 10_000, np.random.default_rng(0))
        mean, std = float(np.mean(out)), float(np.std(out))
        notes.append(f"mean={mean:+.4f} std={std:.4f}")
        assert abs(mean) < 0.05, f"|mean| {abs(mean):.4f} >= 0.05"
        assert 0.95 <= std <= 1.05, f"std {std:.4f} outside [0.95, 1.05]"


# 3 -----------------------------------------------------------------------------

def test_criterion_03_token_vocabulary(criterion_log):
    with criterion(criterion_log, 3, "token vocabulary", 2.0) as notes:
        tokens = [ActionToken.from_id(i) for i in range(VOCAB_SIZE)]
        assert VOCAB_SIZE == 384 and len(set(tokens)) == 384
        assert [t.id for t in tokens] == list(range(384))
        for t in tokens:
            # all magnitude-0 ids share one displacement and snap to the canonical zero token
            expected = t if t.magnitude_bin else ActionToken(0, 0)
            assert quantize_displacement(*dequantize(t)) == expected, t
        rng = np.random.default_rng(3)
        mags = rng.uniform(0.0, 0.1, 20_000)
        angles = rng.uniform(-math.pi, math.pi, mags.size)
        worst = -math.inf
        for m, a in zip(mags, angles):
            dx, dy = m * math.cos(a), m * math.sin(a)
            qx, qy = dequantize(quantize_displacement(dx, dy))
            slack = math.hypot(qx - dx, qy - dy) - quantization_bound(m)
            worst = max(worst, slack)
            assert slack <= 1e-12, (m, a)
        notes.append(f"max(err-bound)={worst:.1e}")


# 4 -----------------------------------------------------------------------------

def test_criterion_04_mask_identities(criterion_log):
    with criterion(criterion_log, 4, "mask metric identities", 5.0) as notes:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(500):
            density = rng.uniform(0.05, 0.95, 2)
            a = BinaryMask(rng.random((24, 32)) < density[0])
            b = BinaryMask(rng.random((24, 32)) < density[1])
            iou, p, r = mask_iou(a, b), mask_precision(a, b), mask_recall(a, b)
            assert iou <= min(p, r)
            if (a.bits & b.bits).any():
                worst = max(worst, abs(1 / iou - (1 / p + 1 / r - 1)))
        assert worst < 1e-12
        clip = _fixture_clip(np.random.default_rng(40), n_frames=25, n_tracks=6)
        gt = render_clip(clip, config=RenderConfig(seed=4))
        rep = score_clip(gt, gt, pred_is_generated=False)
        notes.append(f"max identity err={worst:.1e}")
        assert rep == MaskScoreReport(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


# 5 -----------------------------------------------------------------------------

def _fixture_clip(rng, n_frames=25, n_tracks=5, width=520, height=312):
    """Random clip where each track is present over one random contiguous span."""
    per_frame = [[] for _ in range(n_frames)]
    for tid in range(n_tracks):
        start = int(rng.integers(0, n_frames))
        stop = int(rng.integers(start, n_frames)) + 1
        w, h = rng.uniform(10, 120), rng.uniform(10, 90)
        x, y = rng.uniform(-20, width - 20), rng.uniform(-20, height - 20)
        vx, vy = rng.normal(0, 3, 2)
        label = ["Car", "Van", "Pedestrian", "Cyclist"][tid % 4]
        for f in range(start, stop):
            bx, by = x + vx * f, y + vy * f
            per_frame[f].append(ObjectState(tid, label, Box2D(bx, by, bx + w, by + h)))
    frames = tuple(FrameAnnotation(i, tuple(objs)) for i, objs in enumerate(per_frame))
    return ClipAnnotation(width, height, 7.0, frames)


def test_criterion_05_endpoint_exactness(criterion_log):
    with criterion(criterion_log, 5, "baseline endpoint exactness", 30.0) as notes:
        values = []
        for k in range(20):
            rng = np.random.default_rng(500 + k)
            clip = _fixture_clip(rng, n_tracks=int(rng.integers(1, 9)))
            m = 1 if k % 2 == 0 else 3
            first, last = clip.frames[:m], clip.frames[-1]
            generated = interpolate_baseline(first, last, 25, clip.width, clip.height, clip.fps)
            cond = [list(f.objects) for f in first] + [[] for _ in range(25 - m - 1)] + [list(last.objects)]
            conditioning = ClipAnnotation(clip.width, clip.height, clip.fps,
                                          tuple(FrameAnnotation(i, tuple(o)) for i, o in enumerate(cond)))
            cfg = RenderConfig(seed=k)
            rep = score_clip(render_clip(generated, config=cfg), render_clip(conditioning, config=cfg),
                             pred_is_generated=False)
            values.append(rep.firstlast_maskIoU)
        notes.append(f"min firstlast_maskIoU over 20 fixtures={min(values)}")
        assert all(v == 1.0 for v in values)


# 6 -----------------------------------------------------------------------------

def _random_instance(rng):
    n_frames = int(rng.integers(1, 4))

    def box():
        x, y = rng.integers(0, 20, 2)
        w, h = rng.integers(1, 13, 2)
        return Box2D(int(x), int(y), int(x + w), int(y + h))

    preds = [Detection(int(rng.integers(0, n_frames)), box(), float(rng.choice([0.3, 0.5, 0.7, 0.9, 1.0])))
             for _ in range(int(rng.integers(0, 5)))]
    refs = [Detection(int(rng.integers(0, n_frames)), box()) for _ in range(int(rng.integers(0, 5)))]
    return preds, refs


def test_criterion_06_ap_oracle(criterion_log):
    with criterion(criterion_log, 6, "AP oracle equivalence", 10.0) as notes:
        rng = np.random.default_rng(6)
        checked = 0
        for _ in range(100):
            preds, refs = _random_instance(rng)
            for thr in IOU_THRESHOLDS:
                expected = float(oracle_ap(preds, refs, Fraction(round(thr * 100), 100)))
                assert average_precision(preds, refs, thr) == expected
                checked += 1
        rep = evaluate_coco([Detection(0, Box2D(0, 0, 62, 100), 0.8)], [Detection(0, Box2D(0, 0, 100, 100))])
        notes.append(f"{checked} instance/threshold pairs; IoU-0.62 fixture mAP={rep.mAP}")
        assert rep.mAP == 0.3


# 7 -----------------------------------------------------------------------------

LABEL_TABLE = {
    "KITTI": "car--car; van--car; truck--truck; pedestrian--person; person--person; cyclist--person; tram--train",
    "vKITTI": "car--car; van--car; truck--truck; tram--train",
    "BDD": "pedestrian--person; rider--person; car--car; truck--truck; bus--bus; train--train",
    "nuScenes": ("human.adult--person; human.child--person; human.construction_worker--person; "
                 "human.personal_mobility--person; human.police_officer--person; human.wheelchair--person; "
                 "vehicle.bicycle--person; vehicle.motorcycle--person; "
                 "vehicle.bus--truck; vehicle.construction--truck; vehicle.ambulance--truck; "
                 "vehicle.police--truck; vehicle.trailer--truck; vehicle.truck--truck; car--car"),
}


def test_criterion_07_label_table(criterion_log):
    with criterion(criterion_log, 7, "label mapping table") as notes:
        n = 0
        for dataset, row in LABEL_TABLE.items():
            for pair in row.split("; "):
                src, dst = pair.split("--")
                assert map_class_to_coco(dataset, src) == dst, (dataset, src)
                n += 1
        for dataset in LABEL_TABLE:
            assert map_class_to_coco(dataset, "traffic_cone") is None
        notes.append(f"{n} mappings")


# 8 -----------------------------------------------------------------------------

KITTI_CALIB = "P2: 721.5377 0 609.5593 44.85728 0 721.5377 172.854 0.2163791 0 0 1 0.002745884\n"


def _kitti_fixture(path: Path) -> Path:
    lines = []
    for f in range(25):
        for tid, (x, z, yaw) in enumerate([(-3.0, 12.0, 0.3), (2.5, 18.0, -1.2), (0.5, 28.0, 1.57)]):
            loc = (x + 0.2 * f * (tid - 1), 1.65, z - 0.15 * f)
            u = 609.56 + 721.54 * loc[0] / loc[2]
            v = 172.85 + 721.54 * (loc[1] - 0.75) / loc[2]
            half = 721.54 / loc[2]
            bbox = (u - 1.2 * half, v - 0.8 * half, u + 1.2 * half, v + 0.8 * half)
            vals = [f, tid, "Car", 0, 0, -10, *(f"{b:.2f}" for b in bbox), 1.5, 1.7, 4.2, *loc, yaw]
            lines.append(" ".join(str(v) for v in vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def _render(args):
    assert cli.main(["render", *args]) == 0


def _png_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.png"))}


def test_criterion_08_rendering_golden(criterion_log, tmp_path):
    with criterion(criterion_log, 8, "rendering determinism and raster oracle", 20.0) as notes:
        rng = np.random.default_rng(8)
        clip2d = _fixture_clip(rng, n_tracks=8)
        f2d = tmp_path / "fixture2d.jsonl"
        f2d.write_text(clip_to_jsonl(clip2d))
        ftraj = tmp_path / "fixturetraj.jsonl"
        ftraj.write_text(clip_to_jsonl(_fixture_clip(rng, n_tracks=6)))
        f3d = _kitti_fixture(tmp_path / "fixture3d.txt")
        calib = tmp_path / "calib.txt"
        calib.write_text(KITTI_CALIB)
        # two extra copies per group so the parallel path really runs concurrently
        groups = {
            "2d": ([f2d], []),
            "3d": ([f3d], ["--calib", str(calib), "--require-3d"]),
            "traj": ([ftraj], ["--mode", "trajectory"]),
        }
        outputs = {}
        for name, (files, extra) in groups.items():
            copies = []
            for i in range(2):
                c = tmp_path / f"{files[0].stem}_copy{i}{files[0].suffix}"
                c.write_text(files[0].read_text())
                copies.append(c)
            inputs = [str(p) for p in files + copies]
            runs = []
            for run, jobs in enumerate(("1", "1", "3")):
                out = tmp_path / f"{name}_run{run}"
                _render([*inputs, "--out", str(out), "--jobs", jobs, "--seed", "7", *extra])
                runs.append(_png_bytes(out))
            assert len(runs[0]) == 75
            assert runs[0] == runs[1], f"{name}: rerun differs"
            assert runs[0] == runs[2], f"{name}: --jobs 3 differs from --jobs 1"
            outputs[name] = tmp_path / f"{name}_run0" / files[0].stem

        # the 3D fixture really draws wireframes rather than falling back to 2D outlines
        plain = tmp_path / "3d_nocalib"
        _render([str(f3d), "--out", str(plain), "--seed", "7"])
        assert _png_bytes(plain) != _png_bytes(outputs["3d"])

        mismatched = 0
        half = RenderConfig().outline_width / 2
        for fr in clip2d.frames:
            png = Rgb8Frame.from_png(outputs["2d"] / f"frame_{fr.frame_index:02d}.png")
            expected = brute_force_nonblack([o.box2d for o in fr.objects], 520, 312, half)
            mismatched += int(np.count_nonzero((png.pixels.sum(axis=2) > 0) != expected))
        notes.append(f"3 fixtures x 3 runs identical; 2D raster mismatches={mismatched}")
        assert mismatched == 0


# 9 -----------------------------------------------------------------------------

def test_criterion_09_psnr_ssim(criterion_log):
    with criterion(criterion_log, 9, "PSNR/SSIM fixtures", 5.0) as notes:
        a = np.full((32, 32, 3), 120, np.uint8)
        b = a.copy()
        b[..., 0] += 1
        b[..., 1] -= 1
        b[..., 2] += 1
        p = psnr(a, b)
        assert abs(p - 48.1308) <= 0.001, p
        frame = np.random.default_rng(9).integers(0, 256, (64, 80, 3), dtype=np.uint8)
        s_same = ssim(frame, frame)
        assert abs(s_same - 1.0) <= 1e-9
        c1 = (SsimConfig().k1 * 255) ** 2
        worst = 0.0
        for m1, m2 in ((0, 255), (30, 200), (128, 129), (77, 77)):
            x, y = np.full((24, 24, 3), m1, np.uint8), np.full((24, 24, 3), m2, np.uint8)
            mu1, mu2 = float(luminance(x)[0, 0]), float(luminance(y)[0, 0])
            closed = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
            worst = max(worst, abs(ssim(x, y) - closed))
        assert worst <= 1e-9
        notes.append(f"psnr={p:.4f} ssim(same)={s_same:.12f} max constant-frame err={worst:.1e}")


# 10 ----------------------------------------------------------------------------

def test_criterion_10_suite_runtime(criterion_log):
    if os.environ.get(_CHILD_FLAG):
        pytest.skip("timing the suite from inside the timed run")
    with criterion(criterion_log, 10, "full suite runtime under 120s") as notes:
        t0 = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS_DIR)],
            capture_output=True, text=True, env={**os.environ, _CHILD_FLAG: "1"}, timeout=600)
        elapsed = time.perf_counter() - t0
        tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else ""
        notes.append(f"suite {elapsed:.1f}s [{tail}]")
        assert elapsed < 120.0
        # a failing criterion elsewhere is reported by its own line; only crashes count here
        assert proc.returncode in (0, 1), proc.stdout[-2000:] + proc.stderr[-2000:]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
