"""Classical full-reference metrics used as comparison baselines.

Both operate on [0,1] RGB images. PSNR is computed over all pixels and
channels; MS-SSIM runs on the luminance plane by default (a flag switches
to per-channel RGB averaging) with the canonical five-scale weights and an
11-tap Gaussian window, valid convolution only.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from . import images
from .errors import ShapeError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
# smallest side supporting all five dyadic scales with a full 11-tap window:
# (11 - 1) * 2**4 + 1
MIN_SIDE_FULL_SCALES = 161


@dataclass(frozen=True)
class BaselineResult:
    metric: str
    value: float


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> BaselineResult:
    """10·log10(peak² / MSE); identical inputs give +infinity, not an error."""
    images.validate_image(x)
    images.validate_image(y)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    if mse == 0.0:
        return BaselineResult("psnr", math.inf)
    return BaselineResult("psnr", 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, full-overlap outputs only
    out = convolve2d(a, g[:, None], mode="valid")
    return convolve2d(out, g[None, :], mode="valid")


def _downsample2(a: np.ndarray) -> np.ndarray:
    """2×2 mean pooling; odd edges average the elements actually present."""
    h, w = a.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    total = np.zeros((h2, w2), dtype=a.dtype)
    count = np.zeros((h2, w2), dtype=a.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            part = a[dy::2, dx::2]
            total[: part.shape[0], : part.shape[1]] += part
            count[: part.shape[0], : part.shape[1]] += 1
    return total / count


def _ssim_maps(x: np.ndarray, y: np.ndarray, g: np.ndarray):
    c1 = K1 * K1
    c2 = K2 * K2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    l_map = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs_map = (2.0 * cov + c2) / (var_x + var_y + c2)
    return l_map, cs_map


def _usable_scales(side: int, max_scales: int) -> int:
    scales = 0
    while scales < max_scales and side >= WINDOW_SIZE:
        scales += 1
        side = (side + 1) // 2
    return scales


def _ms_ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    side = min(x.shape)
    n_scales = _usable_scales(side, len(MS_SSIM_WEIGHTS))
    if n_scales == 0:
        raise ShapeError(
            f"images too small for an {WINDOW_SIZE}-tap window: min side {side}"
        )
    weights = np.asarray(MS_SSIM_WEIGHTS[:n_scales], dtype=np.float64)
    if n_scales < len(MS_SSIM_WEIGHTS):
        warnings.warn(
            f"min side {side} < {MIN_SIDE_FULL_SCALES}; "
            f"reducing to {n_scales} scales with renormalized weights",
            stacklevel=3,
        )
        weights = weights / weights.sum()
    g = _gaussian_window()
    score = 1.0
    for i in range(n_scales):
        l_map, cs_map = _ssim_maps(x, y, g)
        if i < n_scales - 1:
            term = float(np.mean(cs_map))
            x = _downsample2(x)
            y = _downsample2(y)
        else:
            term = float(np.mean(l_map * cs_map))
        # negative structure terms would turn fractional powers complex
        score *= max(term, 0.0) ** weights[i]
    return score


def ms_ssim(x: np.ndarray, y: np.ndarray, luminance: bool = True) -> BaselineResult:
    """Five-scale MS-SSIM; set luminance=False to average per-RGB-channel scores."""
    images.validate_image(x)
    images.validate_image(y)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if luminance:
        value = _ms_ssim_plane(images.luminance(x), images.luminance(y))
    else:
        value = float(
            np.mean(
                [
                    _ms_ssim_plane(
                        x[:, :, c].astype(np.float64), y[:, :, c].astype(np.float64)
                    )
                    for c in range(3)
                ]
            )
        )
    return BaselineResult("ms_ssim", value)
