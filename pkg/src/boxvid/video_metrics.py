"""Full-reference frame quality: PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .renderer import Rgb8Frame

EVAL_SIZE = (256, 410)  # (height, width)
BT601 = np.array([0.299, 0.587, 0.114])


class QualityError(ValueError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 1:
            raise QualityError(f"SSIM window must be odd and positive, got {self.window}")
        if self.sigma <= 0:
            raise QualityError(f"SSIM sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class ClipQuality:
    psnr_mean: float  # over finite frames; inf when every frame is identical
    psnr_inf_count: int
    ssim_mean: float
    n_frames: int


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Rgb8Frame) else np.asarray(frame)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise QualityError(f"frame shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b, data_range: float = 255.0) -> float:
    """PSNR in dB over all channels; ``math.inf`` for identical frames."""
    pa, pb = _pixels(a), _pixels(b)
    _check_shapes(pa, pb)
    diff = pa.astype(np.float64) - pb.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def luminance(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    return px @ BT601 if px.ndim == 3 else px


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation; the kernel is symmetric
    n = len(k)
    rows = sum(k[i] * img[:, i:img.shape[1] - n + 1 + i] for i in range(n))
    return sum(k[i] * rows[i:rows.shape[0] - n + 1 + i, :] for i in range(n))


def ssim_map(a, b, config: SsimConfig = SsimConfig()) -> np.ndarray:
    ya, yb = luminance(_pixels(a)), luminance(_pixels(b))
    _check_shapes(ya, yb)
    if min(ya.shape) < config.window:
        raise QualityError(f"frame {ya.shape} smaller than SSIM window {config.window}")
    k = gaussian_kernel(config.window, config.sigma)
    c1 = (config.k1 * config.dynamic_range) ** 2
    c2 = (config.k2 * config.dynamic_range) ** 2
    mu_a = _filter_valid(ya, k)
    mu_b = _filter_valid(yb, k)
    var_a = _filter_valid(ya * ya, k) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, k) - mu_b * mu_b
    cov = _filter_valid(ya * yb, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, config: SsimConfig = SsimConfig()) -> float:
    """Mean Gaussian-windowed SSIM of the BT.601 luminance, windows fully inside the frame."""
    return float(np.mean(ssim_map(a, b, config)))


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping, no prefilter.

    Output is float64 so no extra rounding enters the metrics.
    """
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape[:2]

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    if src.ndim == 3:
        fx = fx[:, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None] if src.ndim == 3 else fy[:, None]
    return top * (1 - fy) + bot * fy


def clip_quality(pred_frames: Sequence, gt_frames: Sequence,
                 eval_size: Optional[tuple[int, int]] = EVAL_SIZE,
                 config: SsimConfig = SsimConfig()) -> ClipQuality:
    """Frame-averaged PSNR and SSIM for a clip.

    Frames are resized to ``eval_size`` (height, width) first unless it is
    None. Frames with infinite PSNR are left out of the PSNR mean and counted.
    """
    if len(pred_frames) != len(gt_frames):
        raise QualityError(f"frame counts differ: {len(pred_frames)} vs {len(gt_frames)}")
    if not gt_frames:
        raise QualityError("empty clip")
    psnrs, ssims = [], []
    for p, g in zip(pred_frames, gt_frames):
        pa, pb = _pixels(p), _pixels(g)
        _check_shapes(pa, pb)
        if eval_size is not None:
            pa = resize_bilinear(pa, *eval_size)
            pb = resize_bilinear(pb, *eval_size)
        psnrs.append(psnr(pa, pb))
        ssims.append(ssim(pa, pb, config))
    finite = [v for v in psnrs if math.isfinite(v)]
    n_inf = len(psnrs) - len(finite)
    psnr_mean = float(np.mean(finite)) if finite else math.inf
    return ClipQuality(psnr_mean, n_inf, float(np.mean(ssims)), len(psnrs))
