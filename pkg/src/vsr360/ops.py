"""Differentiable neural operators: convolutions (regular and deformable),
activations, attention blocks, pixel shuffle, and resampling kernels.

All ops are pure functions recording onto the active Tape (see autodiff).
Image layout is (batch, channels, height, width) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, record_op, tmean, elementwise


@dataclass
class ConvWeights:
    """Kernel (out_ch, in_ch, kH, kW), bias (out_ch,), stride and zero padding."""
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        co, ci, kh, kw = self.kernel.shape
        if kh < 1 or kw < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.bias.shape != (co,):
            raise ValueError(f"bias shape {self.bias.shape} does not match out_channels {co}")


@dataclass
class OffsetField:
    """Per-tap (dy, dx) offsets, shape (batch, 2*kH*kW, H, W)."""
    offsets: Tensor


def conv2d(x, w: ConvWeights):
    """2-d cross-correlation with zero padding, differentiable w.r.t. input,
    kernel and bias."""
    return _conv2d(x, w.kernel, w.bias, w.stride, w.padding)


def _conv2d(x, kernel, bias, stride=1, padding=0):
    B, Ci, H, W = x.shape
    Co, Ci2, kh, kw = kernel.shape
    if Ci != Ci2:
        raise ValueError(f"input has {Ci} channels, kernel expects {Ci2}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if (Hp - kh) % stride != 0 or (Wp - kw) % stride != 0:
        raise ValueError("non-integral output extent")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("non-positive output extent")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("bihwkl,oikl->bohw", cols, kernel.data, optimize=True)
    out_data = out_data + bias.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        gk = np.einsum("bihwkl,bohw->oikl", cols, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        t = np.einsum("bohw,oikl->bihwkl", g, kernel.data, optimize=True)
        gpad = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += t[:, :, :, :, i, j]
        gx = gpad[:, :, padding:padding + H, padding:padding + W]
        return np.ascontiguousarray(gx), gk, gb

    return record_op(out, (x, kernel, bias), bwd)


def bilinear_sample(feature, y, x, channel=0, batch=0):
    """4-neighbor bilinear lookup with zero padding outside bounds.

    Scalar helper used by tests as the per-tap oracle for deformable
    convolution; the batched, differentiable path lives in deformable_conv2d.
    """
    plane = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    plane = plane[batch, channel]
    H, W = plane.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    val = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < H and 0 <= xx < W:
                val += wy * wx * float(plane[yy, xx])
    return val


def deformable_conv2d(x, off, w: ConvWeights):
    """Convolution on a per-position deformed sampling grid.

    Each kernel tap reads the input at its regular position plus a learned
    fractional (dy, dx) offset, via bilinear interpolation with zero padding.
    Differentiable w.r.t. input, offsets, kernel and bias.
    """
    offsets = off.offsets if isinstance(off, OffsetField) else off
    B, Ci, H, W = x.shape
    Co, Ci2, kh, kw = w.kernel.shape
    if Ci != Ci2:
        raise ValueError(f"input has {Ci} channels, kernel expects {Ci2}")
    K = kh * kw
    stride, padding = w.stride, w.padding
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if offsets.shape[1] != 2 * K:
        raise ValueError(f"offset field has {offsets.shape[1]} channels, expected {2 * K}")
    if offsets.shape[0] != B or offsets.shape[2:] != (Ho, Wo):
        raise ValueError(f"offset field shape {offsets.shape} does not match output ({B},{2*K},{Ho},{Wo})")

    xd = x.data
    dy = offsets.data[:, 0::2]  # (B, K, Ho, Wo)
    dx = offsets.data[:, 1::2]
    tap_i = np.repeat(np.arange(kh), kw).reshape(K, 1, 1)
    tap_j = np.tile(np.arange(kw), kh).reshape(K, 1, 1)
    base_y = np.arange(Ho).reshape(1, Ho, 1) * stride - padding + tap_i
    base_x = np.arange(Wo).reshape(1, 1, Wo) * stride - padding + tap_j
    Y = base_y[None] + dy
    X = base_x[None] + dx

    y0 = np.floor(Y).astype(np.int64)
    x0 = np.floor(X).astype(np.int64)
    fy = (Y - y0).astype(xd.dtype)
    fx = (X - x0).astype(xd.dtype)

    bidx = np.arange(B).reshape(B, 1, 1, 1)

    def corner(yi, xi):
        m = ((yi >= 0) & (yi < H) & (xi >= 0) & (xi < W))
        yc = np.clip(yi, 0, H - 1)
        xc = np.clip(xi, 0, W - 1)
        v = xd[bidx, :, yc, xc]  # (B, K, Ho, Wo, Ci)
        v = v * m[..., None].astype(xd.dtype)
        return v, yc, xc, m

    v00, y00, x00, m00 = corner(y0, x0)
    v01, y01, x01, m01 = corner(y0, x0 + 1)
    v10, y10, x10, m10 = corner(y0 + 1, x0)
    v11, y11, x11, m11 = corner(y0 + 1, x0 + 1)

    fy_ = fy[..., None]
    fx_ = fx[..., None]
    S = ((1 - fy_) * (1 - fx_) * v00 + (1 - fy_) * fx_ * v01
         + fy_ * (1 - fx_) * v10 + fy_ * fx_ * v11)  # (B, K, Ho, Wo, Ci)

    kflat = w.kernel.data.reshape(Co, Ci, K)
    out_data = np.einsum("bkhwi,oik->bohw", S, kflat, optimize=True)
    out_data = out_data + w.bias.data[None, :, None, None]
    out = Tensor(out_data)

    def bwd(g):
        gS = np.einsum("oik,bohw->bkhwi", kflat, g, optimize=True)
        gk = np.einsum("bkhwi,bohw->oik", S, g, optimize=True).reshape(Co, Ci, kh, kw)
        gb = g.sum(axis=(0, 2, 3))

        dSdy = (v10 - v00) * (1 - fx_) + (v11 - v01) * fx_
        dSdx = (v01 - v00) * (1 - fy_) + (v11 - v10) * fy_
        goff = np.empty_like(offsets.data)
        goff[:, 0::2] = (gS * dSdy).sum(axis=-1)
        goff[:, 1::2] = (gS * dSdx).sum(axis=-1)

        # scatter-add the four corner contributions back onto the input grid
        bci = (np.arange(B).reshape(B, 1, 1, 1, 1) * Ci
               + np.arange(Ci).reshape(1, 1, 1, 1, Ci)) * (H * W)
        idx_parts, val_parts = [], []
        for (yc, xc, m, cw) in (
                (y00, x00, m00, (1 - fy_) * (1 - fx_)),
                (y01, x01, m01, (1 - fy_) * fx_),
                (y10, x10, m10, fy_ * (1 - fx_)),
                (y11, x11, m11, fy_ * fx_)):
            idx = bci + (yc * W + xc)[..., None]
            val = gS * cw * m[..., None]
            idx_parts.append(idx.ravel())
            val_parts.append(val.ravel())
        gx = np.bincount(np.concatenate(idx_parts),
                         weights=np.concatenate(val_parts),
                         minlength=B * Ci * H * W)
        gx = gx.reshape(B, Ci, H, W).astype(xd.dtype)
        return gx, goff, gk, gb

    off_t = offsets
    return record_op(out, (x, off_t, w.kernel, w.bias), bwd)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    mask = (x.data > 0).astype(x.dtype)
    return record_op(out, (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    s = s.astype(x.dtype)
    out = Tensor(s)
    return record_op(out, (x,), lambda g: (g * s * (1 - s),))


def pointwise_activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation: {kind}")


def pixel_shuffle(x, s):
    """(B, s^2 C, H, W) -> (B, C, sH, sW); pure index permutation."""
    B, C2, H, W = x.shape
    if C2 % (s * s) != 0:
        raise ValueError(f"channel extent {C2} not divisible by {s * s}")
    C = C2 // (s * s)
    out_data = (x.data.reshape(B, C, s, s, H, W)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(B, C, H * s, W * s))
    out = Tensor(np.ascontiguousarray(out_data))

    def bwd(g):
        gx = (g.reshape(B, C, H, s, W, s)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(B, C2, H, W))
        return (np.ascontiguousarray(gx),)

    return record_op(out, (x,), bwd)


def pixel_unshuffle(x, s):
    """Inverse of pixel_shuffle: (B, C, sH, sW) -> (B, s^2 C, H, W)."""
    B, C, Hs, Ws = x.shape
    if Hs % s != 0 or Ws % s != 0:
        raise ValueError(f"spatial extents {(Hs, Ws)} not divisible by {s}")
    H, W = Hs // s, Ws // s
    out_data = (x.data.reshape(B, C, H, s, W, s)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(B, C * s * s, H, W))
    out = Tensor(np.ascontiguousarray(out_data))

    def bwd(g):
        gx = (g.reshape(B, C, s, s, H, W)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(B, C, Hs, Ws))
        return (np.ascontiguousarray(gx),)

    return record_op(out, (x,), bwd)


def concat(tensors, axis=1):
    """Concatenate along ``axis``; backward splits the gradient."""
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return record_op(out, tuple(tensors), bwd)


def channel_max(x):
    """Max over the channel axis, keepdims; ties route to the first channel."""
    idx = np.argmax(x.data, axis=1)[:, None]  # (B,1,H,W)
    out = Tensor(np.take_along_axis(x.data, idx, axis=1))

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return record_op(out, (x,), bwd)


def _linear_resize_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic bilinear weight matrix with half-pixel centers and
    border clamping."""
    o = np.arange(n_out)
    src = (o + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    np.add.at(A, (o, i0c), 1.0 - f)
    np.add.at(A, (o, i1c), f)
    return A


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize with half-pixel centers; differentiable w.r.t. the image."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be >= 1")
    B, C, H, W = x.shape
    Ay = _linear_resize_matrix(H, out_h, x.dtype)
    Ax = _linear_resize_matrix(W, out_w, x.dtype)
    out_data = np.einsum("oh,bchw,pw->bcop", Ay, x.data, Ax, optimize=True)
    out = Tensor(out_data)

    def bwd(g):
        gx = np.einsum("oh,bcop,pw->bchw", Ay, g, Ax, optimize=True)
        return (gx,)

    return record_op(out, (x,), bwd)


def _cubic_kernel(t, a=-0.5):
    at = np.abs(t)
    w = np.where(at <= 1,
                 (a + 2) * at ** 3 - (a + 3) * at ** 2 + 1,
                 np.where(at < 2, a * at ** 3 - 5 * a * at ** 2 + 8 * a * at - 4 * a, 0.0))
    return w


def _cubic_resize_matrix(n_in, n_out, dtype=np.float64):
    """Cubic-convolution weight matrix (a = -0.5), half-pixel centers,
    kernel widened by the scale ratio when downscaling, border replication,
    rows normalized to sum 1."""
    scale = n_in / n_out
    widen = max(1.0, scale)
    support = 2.0 * widen
    A = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.floor(center + support))
        j = np.arange(lo, hi + 1)
        w = _cubic_kernel((center - j) / widen)
        s = w.sum()
        if s != 0:
            w = w / s
        jc = np.clip(j, 0, n_in - 1)
        np.add.at(A, (np.full_like(jc, o), jc), w)
    return A


def bicubic_resize(image, out_h, out_w):
    """Separable cubic-convolution resize on plain numpy arrays.

    Data-preparation only (not taped).  Accepts (..., H, W) arrays and returns
    float64.  Antialiasing widens the kernel when downscaling.
    """
    img = np.asarray(image, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be >= 1")
    H, W = img.shape[-2:]
    Ay = _cubic_resize_matrix(H, out_h)
    Ax = _cubic_resize_matrix(W, out_w)
    tmp = np.einsum("oh,...hw->...ow", Ay, img)
    return np.einsum("pw,...ow->...op", Ax, tmp)


# ---------------------------------------------------------------------------
# attention and residual blocks
# ---------------------------------------------------------------------------

@dataclass
class ChannelAttentionParams:
    squeeze: ConvWeights   # 1x1, C -> C/r
    excite: ConvWeights    # 1x1, C/r -> C


@dataclass
class SpatialAttentionParams:
    conv: ConvWeights      # 7x7, 2 -> 1, pad 3


def channel_attention(features, p: ChannelAttentionParams):
    """Squeeze-excite style per-channel map in (0, 1), shape (B, C, 1, 1)."""
    gap = tmean(features, axes=(2, 3), keepdims=True)
    z = relu(conv2d(gap, p.squeeze))
    return sigmoid(conv2d(z, p.excite))


def spatial_attention(features, p: SpatialAttentionParams):
    """Per-pixel map in (0, 1), shape (B, 1, H, W), from pooled mean/max planes."""
    mean_plane = tmean(features, axes=(1,), keepdims=True)
    max_plane = channel_max(features)
    pooled = concat([mean_plane, max_plane], axis=1)
    return sigmoid(conv2d(pooled, p.conv))


def mixed_attention(features, ca: ChannelAttentionParams, sa: SpatialAttentionParams):
    """features * (channel map + spatial map), both maps broadcast."""
    amap = elementwise(channel_attention(features, ca), spatial_attention(features, sa), "add")
    return elementwise(features, amap, "mul")


@dataclass
class ResidualBlockParams:
    conv1: ConvWeights
    conv2: ConvWeights


def residual_block(features, p: ResidualBlockParams):
    """x + conv(relu(conv(x))); channel extent preserved."""
    if p.conv1.kernel.shape[1] != features.shape[1]:
        raise ValueError("channel mismatch in residual block")
    r = conv2d(relu(conv2d(features, p.conv1)), p.conv2)
    return elementwise(features, r, "add")


@dataclass
class ResidualDenseBlockParams:
    layers: list          # ConvWeights, each (growth, width + i*growth, 3, 3)
    transition: ConvWeights  # 1x1, width + len(layers)*growth -> width


def residual_dense_block(features, p: ResidualDenseBlockParams):
    """Densely connected 3x3 convs (ReLU each) + 1x1 transition, residual add."""
    if p.layers[0].kernel.shape[1] != features.shape[1]:
        raise ValueError("width mismatch in residual dense block")
    feats = [features]
    for cw in p.layers:
        inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
        feats.append(relu(conv2d(inp, cw)))
    dense = concat(feats, axis=1)
    r = conv2d(dense, p.transition)
    return elementwise(features, r, "add")


def zero_pad2d(x, top, bottom, left, right):
    """Zero padding of the two trailing axes; differentiable."""
    B, C, H, W = x.shape
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))))

    def bwd(g):
        return (np.ascontiguousarray(g[:, :, top:top + H, left:left + W]),)

    return record_op(out, (x,), bwd)
