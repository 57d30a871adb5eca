"""Planar and spherically weighted quality metrics (PSNR/SSIM and their
latitude-weighted WS- variants) on plain numpy images."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import LatitudeWeights, latitude_weights

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(sr, hr):
    sr = np.asarray(sr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    if sr.ndim != 2:
        raise ValueError("metrics expect single-channel 2-d images")
    return sr, hr


def weighted_mse(sr, hr, row_w):
    """Mean squared error with per-row weights (raw, normalized internally)."""
    sr, hr = _check_pair(sr, hr)
    H, W = sr.shape
    rw = np.asarray(row_w, dtype=np.float64)
    if rw.shape != (H,):
        raise ValueError(f"row weights shape {rw.shape} does not match height {H}")
    num = (rw[:, None] * (sr - hr) ** 2).sum()
    return num / (W * rw.sum())


def ws_psnr(sr, hr, lw: LatitudeWeights, peak=255.0):
    """Latitude-weighted PSNR in dB, capped at the 99.0 sentinel."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    m = weighted_mse(sr, hr, lw.w)
    if m == 0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / m), PSNR_CAP_DB)


def psnr(sr, hr, peak=255.0):
    """Uniform-weight PSNR, same sentinel cap as ws_psnr."""
    sr2, _ = _check_pair(sr, hr)
    return ws_psnr(sr, hr, latitude_uniform(sr2.shape[0], sr2.shape[1]), peak)


def latitude_uniform(height, width):
    """All-ones weights; turns the WS metrics into their planar versions."""
    return LatitudeWeights(height=height, width=width,
                           w=np.ones(height), normalizer=float(width * height))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, kern):
    win = sliding_window_view(img, kern.shape)
    return np.einsum("hwij,ij->hw", win, kern)


def ssim_map(sr, hr, peak=255.0):
    """Per-window SSIM index map, valid windows only (no padding)."""
    sr, hr = _check_pair(sr, hr)
    if min(sr.shape) < SSIM_WINDOW:
        raise ValueError(f"image {sr.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kern = _gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu1 = _filter_valid(sr, kern)
    mu2 = _filter_valid(hr, kern)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _filter_valid(sr * sr, kern) - mu1_sq
    s2 = _filter_valid(hr * hr, kern) - mu2_sq
    s12 = _filter_valid(sr * hr, kern) - mu12
    return (((2 * mu12 + c1) * (2 * s12 + c2))
            / ((mu1_sq + mu2_sq + c1) * (s1 + s2 + c2)))


def ssim(sr, hr, peak=255.0):
    return float(ssim_map(sr, hr, peak).mean())


def ws_ssim(sr, hr, lw: LatitudeWeights, peak=255.0):
    """Latitude-weighted mean of the SSIM map.

    Each map row is weighted by the latitude weight of the image row at its
    window center (offset (window-1)/2 from the valid crop).
    """
    m = ssim_map(sr, hr, peak)
    off = (SSIM_WINDOW - 1) // 2
    rw = lw.w[off:off + m.shape[0]]
    return float((rw[:, None] * m).sum() / (m.shape[1] * rw.sum()))


def frame_metrics(sr, hr, lw: LatitudeWeights, peak=255.0):
    """All four scores for one frame pair, as a plain dict."""
    return {
        "ws_psnr": float(ws_psnr(sr, hr, lw, peak)),
        "ws_ssim": float(ws_ssim(sr, hr, lw, peak)),
        "psnr": float(psnr(sr, hr, peak)),
        "ssim": float(ssim(sr, hr, peak)),
    }
