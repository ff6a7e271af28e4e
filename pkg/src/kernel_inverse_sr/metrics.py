"""Full-reference quality metrics: PSNR and single-scale SSIM."""

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ParameterError

BT601 = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    border_crop: int

    def as_record(self, **extra):
        # JSON has no infinity; identical images are reported as "inf"
        psnr = "inf" if math.isinf(self.psnr_db) else self.psnr_db
        return {**extra, "psnr": psnr, "ssim": self.ssim, "crop": self.border_crop}


def _pair(a, b, crop):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    if crop:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    return a, b


def psnr(a, b, crop=0):
    """Peak signal-to-noise ratio in dB for peak value 1.

    The squared error is averaged over pixels and channels. Identical inputs
    give ``inf``.
    """
    a, b = _pair(a, b, crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ BT601
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    x = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(x, g.size, axis=1) @ g


def ssim_map(a, b):
    """Local SSIM over every full 11x11 Gaussian window of two 2D images."""
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b, crop=0):
    """Mean single-scale SSIM on the BT.601 luminance of two images."""
    a, b = _pair(a, b, crop)
    a, b = luminance(a), luminance(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ParameterError(
            f"image of size {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    return float(np.mean(ssim_map(a, b)))


def report(sr, hr, crop=0):
    return MetricReport(psnr(sr, hr, crop), ssim(sr, hr, crop), crop)


def write_records(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def summarize(records):
    """Mean PSNR/SSIM per (method, scale) over line records."""
    groups = {}
    for r in records:
        groups.setdefault((r["method"], r["scale"]), []).append(r)
    out = []
    for (method, scale), rs in sorted(groups.items()):
        ps = [math.inf if r["psnr"] == "inf" else r["psnr"] for r in rs]
        out.append({
            "method": method,
            "scale": scale,
            "n": len(rs),
            "psnr": float(np.mean(ps)),
            "ssim": float(np.mean([r["ssim"] for r in rs])),
        })
    return out
