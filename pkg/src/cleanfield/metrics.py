"""Image fidelity metrics and the off-surface density diagnostic."""
from __future__ import annotations

import csv
import io
import math

import numpy as np
from scipy.signal import convolve2d

from .errors import InvalidInputError
from .field import VoxelField, relu
from .image import Image
from .scenes import SceneOracle

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_dims(a: Image, b: Image):
    if a.pixels.shape != b.pixels.shape:
        raise InvalidInputError(f"image dimensions differ: {a.pixels.shape} vs {b.pixels.shape}")


def psnr(a: Image, b: Image) -> float:
    """-10 log10(MSE) at unit peak; infinity for identical images."""
    _check_dims(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def mae(a: Image, b: Image) -> float:
    _check_dims(a, b)
    return float(np.mean(np.abs(a.pixels - b.pixels)))


def _ssim_window() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: Image, b: Image) -> float:
    """Single-scale SSIM with the standard 11x11 Gaussian window, averaged over
    channels and valid window positions."""
    _check_dims(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    window = _ssim_window()
    per_channel = []
    for ch in range(3):
        x = a.pixels[:, :, ch]
        y = b.pixels[:, :, ch]
        mu_x = convolve2d(x, window, mode="valid")
        mu_y = convolve2d(y, window, mode="valid")
        var_x = convolve2d(x * x, window, mode="valid") - mu_x**2
        var_y = convolve2d(y * y, window, mode="valid") - mu_y**2
        cov = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        per_channel.append(float(np.mean(num / den)))
    return float(np.mean(per_channel))


def floater_volume(field: VoxelField, scene: SceneOracle, density_thres: float) -> float:
    """Fraction of voxel centers with activated density above threshold lying
    outside every sphere dilated by one voxel diagonal."""
    sigma = relu(field.density_raw)
    over = sigma > density_thres
    if not np.any(over):
        return 0.0
    dilation = float(np.linalg.norm(field.spacing))
    inside = scene.contains(field.node_coords(), dilation=dilation)
    return float(np.count_nonzero(over & ~inside)) / field.nvox


def format_metric_report(rows: list[tuple[str, float, float, float]]) -> str:
    """CSV report: view_id,psnr,ssim,mae per view plus a mean summary row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["view_id", "psnr", "ssim", "mae"])
    for view_id, p, s, m in rows:
        writer.writerow([view_id, repr(float(p)), repr(float(s)), repr(float(m))])
    if rows:
        means = [float(np.mean([r[i] for r in rows])) for i in (1, 2, 3)]
        writer.writerow(["mean", *[repr(v) for v in means]])
    return buf.getvalue()


def parse_metric_report(text: str) -> dict[str, tuple[float, float, float]]:
    """Inverse of format_metric_report, keyed by view_id."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["view_id", "psnr", "ssim", "mae"]:
        raise InvalidInputError(f"unexpected report header: {header}")
    return {row[0]: (float(row[1]), float(row[2]), float(row[3])) for row in reader if row}
