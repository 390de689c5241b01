"""Color conversion, reference bicubic resampling and Y-channel metrics.

The conventions here are the ones the SR benchmark tables assume and they
are load-bearing: luminance is limited-range BT.601 (the MATLAB
``rgb2ycbcr`` convention), the bicubic kernel uses a = -0.5 with half-pixel
alignment and antialias widening on downscale (the MATLAB ``imresize``
convention), metrics shave ``scale`` border pixels, and SSIM is the
original single-scale formulation with an 11x11 sigma-1.5 Gaussian window
over valid positions only.  Change any of these and the published bicubic
baselines stop being reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class PlanarImage:
    """8-bit RGB raster (H, W, 3) with float-plane views in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"PlanarImage needs uint8 (H, W, 3), got {p.dtype} {p.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_float(self) -> np.ndarray:
        """(H, W, 3) float64 in [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    @staticmethod
    def from_float(arr: np.ndarray) -> "PlanarImage":
        """Quantize a [0, 1] float array with round-half-up; lossless on exact grid values."""
        q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5)
        return PlanarImage(q.astype(np.uint8))

    def to_chw(self) -> np.ndarray:
        """(1, 3, H, W) float32 network input in [0, 1]."""
        return (self.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]

    @staticmethod
    def from_chw(arr: np.ndarray) -> "PlanarImage":
        if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
            raise ValueError(f"expected (1, 3, H, W), got {arr.shape}")
        return PlanarImage.from_float(np.asarray(arr[0]).transpose(1, 2, 0))


def rgb_to_y(img) -> np.ndarray:
    """Limited-range BT.601 luminance in [16, 235] from 8-bit RGB."""
    rgb = img.pixels if isinstance(img, PlanarImage) else np.asarray(img)
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(
        ax <= 1,
        1.5 * ax3 - 2.5 * ax2 + 1.0,
        np.where(ax < 2, -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0, 0.0),
    )


@lru_cache(maxsize=512)
def _resize_axis_weights(src: int, dst: int, antialias: bool) -> tuple[np.ndarray, np.ndarray]:
    """Clamped source indices and normalized kernel weights for one axis."""
    scale = dst / src
    if antialias and scale < 1.0:
        width = 4.0 / scale
        kernel = lambda x: scale * _cubic(scale * x)  # noqa: E731
    else:
        width = 4.0
        kernel = _cubic
    u = (np.arange(dst) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kernel(u[:, None] - idx)
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, src - 1)  # boundary replication
    return idx, wts


def _resize_along(plane: np.ndarray, dst: int, antialias: bool, axis: int) -> np.ndarray:
    idx, wts = _resize_axis_weights(plane.shape[axis], dst, antialias)
    gathered = np.take(plane, idx, axis=axis)  # inserts a taps axis after `axis`
    return np.einsum(gathered, [*range(gathered.ndim)], wts, [axis, axis + 1], [*range(axis + 1), *range(axis + 2, gathered.ndim)])


def bicubic_resize(plane: np.ndarray, scale: float | None = None,
                   size: tuple[int, int] | None = None, antialias: bool = True) -> np.ndarray:
    """Separable cubic (a = -0.5) resampling of an (H, W) or (H, W, C) array.

    Give either ``scale`` (output size is ceil(scale * input), the reference
    resampler's rule) or an explicit ``size`` (h, w).  ``antialias`` widens
    the kernel by 1/scale when downscaling, which is what makes LR
    generation match the benchmark degradation.
    """
    if (scale is None) == (size is None):
        raise ValueError("bicubic_resize: give exactly one of scale or size")
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"bicubic_resize: expected (H, W) or (H, W, C), got {arr.shape}")
    h, w = arr.shape[:2]
    if size is None:
        size = (int(np.ceil(h * scale)), int(np.ceil(w * scale)))
    th, tw = size
    if th < 1 or tw < 1:
        raise ValueError(f"bicubic_resize: target {th}x{tw} must be >= 1")
    out = _resize_along(arr, th, antialias, axis=0)
    out = _resize_along(out, tw, antialias, axis=1)
    return out


def resize_rgb(img: PlanarImage, scale: float | None = None,
               size: tuple[int, int] | None = None, antialias: bool = True) -> PlanarImage:
    """Bicubic resize of an 8-bit image, re-quantized round-half-up."""
    out = bicubic_resize(img.to_float(), scale=scale, size=size, antialias=antialias)
    return PlanarImage.from_float(out)


def _shaved_y(sr, hr, shave: int) -> tuple[np.ndarray, np.ndarray]:
    ys, yh = rgb_to_y(sr), rgb_to_y(hr)
    if ys.shape != yh.shape:
        raise ValueError(f"metric inputs differ in size: {ys.shape} vs {yh.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    if shave:
        if ys.shape[0] <= 2 * shave or ys.shape[1] <= 2 * shave:
            raise ValueError(f"image {ys.shape} too small to shave {shave} pixels per side")
        ys = ys[shave:-shave, shave:-shave]
        yh = yh[shave:-shave, shave:-shave]
    return ys, yh


def psnr_y(sr, hr, shave: int = 0) -> float:
    """Y-channel PSNR in dB over shaved planes; capped at 100 dB (zero MSE)."""
    ys, yh = _shaved_y(sr, hr, shave)
    mse = float(np.mean((ys - yh) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0**2 / mse))


@lru_cache(maxsize=8)
def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D window along both axes."""
    k = g.size
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    out = win @ g
    win = np.lib.stride_tricks.sliding_window_view(out, k, axis=1)
    return win @ g


def ssim_y(sr, hr, shave: int = 0) -> float:
    """Single-scale SSIM on the Y channel, mean over valid window positions.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range
    255; images must be at least 11x11 after shaving.
    """
    ys, yh = _shaved_y(sr, hr, shave)
    g = _gaussian_window()
    if ys.shape[0] < g.size or ys.shape[1] < g.size:
        raise ValueError(f"image {ys.shape} smaller than the {g.size}x{g.size} SSIM window")
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu1 = _filter_valid(ys, g)
    mu2 = _filter_valid(yh, g)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = _filter_valid(ys * ys, g) - mu1_sq
    sigma2_sq = _filter_valid(yh * yh, g) - mu2_sq
    sigma12 = _filter_valid(ys * yh, g) - mu1_mu2
    num = (2.0 * mu1_mu2 + c1) * (2.0 * sigma12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2)
    return float(np.mean(num / den))
