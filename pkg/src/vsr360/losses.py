"""Latitude-weighted training losses for equirectangular frames.

ERP rows oversample high latitudes, so the loss weights each pixel by the
cosine of its latitude: row j of an N-row frame gets
``w[j] = cos((j + 0.5 - N/2) * pi / N)``, maximal at the equator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, elementwise, tsum, scale


@dataclass
class LatitudeWeights:
    """Per-row cosine weights for a frame of the given extents."""
    height: int
    width: int
    w: np.ndarray = field(repr=False)
    normalizer: float

    def rows(self, start, count):
        """Weight sub-vector for rows [start, start + count)."""
        return self.w[start:start + count]


def latitude_weights(height, width):
    if height < 1 or width < 1:
        raise ValueError("extents must be >= 1")
    j = np.arange(height, dtype=np.float64)
    w = np.cos((j + 0.5 - height / 2.0) * np.pi / height)
    return LatitudeWeights(height=height, width=width, w=w,
                           normalizer=float(width * w.sum()))


def _row_weight_tensor(row_w, width, batch, dtype):
    """Normalized per-sample row weights as a (B, 1, H, 1) array.

    ``row_w`` is (H,) shared across the batch or (B, H) per sample; each
    sample is normalized by width * sum(rows) so the result sums to 1 per
    sample image.
    """
    rw = np.asarray(row_w, dtype=np.float64)
    if rw.ndim == 1:
        rw = np.broadcast_to(rw, (batch, rw.shape[0]))
    norm = width * rw.sum(axis=1, keepdims=True)
    if np.any(norm <= 0):
        raise ValueError("non-positive weight normalizer")
    wn = (rw / norm).astype(dtype)
    return wn[:, None, :, None]


def wmse(sr, hr, row_w):
    """Latitude-weighted MSE, averaged over the batch; differentiable w.r.t. sr.

    ``sr`` and ``hr`` are (B, C, H, W) tensors; ``row_w`` holds the raw
    (unnormalized) latitude weights of the H rows, shared (H,) or per sample
    (B, H).
    """
    hr = hr if isinstance(hr, Tensor) else Tensor(np.asarray(hr), dtype=sr.dtype)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    B, C, H, W = sr.shape
    wt = Tensor(_row_weight_tensor(row_w, W, B, sr.dtype))
    diff = elementwise(sr, hr, "sub")
    sq = elementwise(diff, diff, "mul")
    weighted = elementwise(sq, wt, "mul")
    return scale(tsum(weighted), 1.0 / (B * C))


def wmse_frame(sr, hr, lw: LatitudeWeights):
    """wmse against the full-frame latitude weights of ``lw``."""
    if sr.shape[-2] != lw.height or sr.shape[-1] != lw.width:
        raise ValueError(f"frame extents {sr.shape[-2:]} do not match weights "
                         f"({lw.height}, {lw.width})")
    return wmse(sr, hr, lw.w)


def total_loss_components(sr, hr, lr, dual_out, lam, hr_row_w, lr_row_w):
    """(total, primary, dual) per the dual-learning objective.

    primary = WMSE(sr, hr); dual = WMSE(dual_out, lr); total = primary +
    lam * dual.  With ``dual_out`` None the dual term is zero.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    primary = wmse(sr, hr, hr_row_w)
    if dual_out is None:
        return primary, primary, None
    dual = wmse(dual_out, lr, lr_row_w)
    total = elementwise(primary, scale(dual, lam), "add")
    return total, primary, dual


def total_loss(sr, hr, lr, dual_out, lam, hr_row_w, lr_row_w):
    return total_loss_components(sr, hr, lr, dual_out, lam, hr_row_w, lr_row_w)[0]
