"""The joint single-frame / multi-frame super-resolution network.

The network consumes 2N+1 consecutive low-resolution Y-channel frames and
predicts a residual over the bilinearly upsampled target frame:

  * single-frame branch: a deep plain-conv stack with sub-pixel upscaling;
  * multi-frame branch: shared feature extraction, deformable-convolution
    alignment of neighbor features to the target, and a reconstruction stack
    of residual dense blocks with mixed attention and sub-pixel upscaling;
  * fusion: three 3x3 convs merging both branch outputs;
  * dual network (training only): two stride-2 convs mapping the SR output
    back to LR space for the dual-consistency loss.

Every removable sub-network (attention, alignment, dual, fusion, single-frame
branch) has a config switch so the ablation variants can be built.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, elementwise
from . import ops
from .ops import ConvWeights

RDB_LAYERS = 5


@dataclass
class SmfnConfig:
    scale: int = 4
    temporal_radius: int = 1
    base_width: int = 64
    num_residual_blocks: int = 3
    num_rdb: int = 5
    rdb_growth: int = 32
    single_frame_depth: int = 32
    lambda_dual: float = 0.1
    in_channels: int = 1
    ca_reduction: int = 16
    use_attention: bool = True
    use_alignment: bool = True
    use_dual: bool = True
    use_fusion: bool = True
    use_single_frame: bool = True

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.temporal_radius < 0:
            raise ValueError("temporal_radius must be >= 0")
        for name in ("base_width", "num_residual_blocks", "num_rdb", "rdb_growth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.single_frame_depth < 3:
            raise ValueError("single_frame_depth must be >= 3")
        if self.use_attention and self.base_width % self.ca_reduction != 0:
            raise ValueError("base_width must be divisible by ca_reduction")

    @property
    def num_frames(self):
        return 2 * self.temporal_radius + 1

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class _ParamBuilder:
    """Creates (or re-binds, when loading a checkpoint) named conv weights."""

    def __init__(self, rng, preset=None, dtype=np.float32):
        self.rng = rng
        self.preset = preset
        self.dtype = dtype
        self.tensors = {}

    def conv(self, name, co, ci, k, stride=1, padding=None, init="kaiming"):
        if padding is None:
            padding = (k - 1) // 2
        kshape = (co, ci, k, k)
        if self.preset is not None:
            kdata = self.preset[name + ".kernel"]
            bdata = self.preset[name + ".bias"]
            if kdata.shape != kshape:
                raise ValueError(f"{name}.kernel has shape {kdata.shape}, expected {kshape}")
        else:
            if init == "zero":
                kdata = np.zeros(kshape, dtype=self.dtype)
            else:
                fan_in = ci * k * k
                std = np.sqrt(2.0 / fan_in)
                kdata = (self.rng.standard_normal(kshape) * std).astype(self.dtype)
            bdata = np.zeros(co, dtype=self.dtype)
        kernel = Tensor(kdata.astype(self.dtype), requires_grad=True)
        bias = Tensor(bdata.astype(self.dtype), requires_grad=True)
        self.tensors[name + ".kernel"] = kernel
        self.tensors[name + ".bias"] = bias
        return ConvWeights(kernel, bias, stride=stride, padding=padding)


class SmfnModel:
    """Parameter container plus all forward paths.

    Construction is deterministic in (config, seed); ``tensors`` overrides the
    random init with checkpoint values.
    """

    def __init__(self, config: SmfnConfig, seed=0, tensors=None, dtype=np.float32):
        self.config = config
        cfg = config
        C = cfg.base_width
        K = 9  # 3x3 alignment kernel taps
        b = _ParamBuilder(np.random.default_rng(seed), preset=tensors, dtype=dtype)

        # only the last conv before the bilinear skip connection is
        # zero-initialized; zeroing the branch heads as well would leave the
        # fusion stack without any gradient signal (zero features into a zero
        # kernel) and the network would never train
        head_init = "kaiming" if cfg.use_fusion else "zero"

        if cfg.use_single_frame:
            self.single_convs = [b.conv("single.conv00", C, cfg.in_channels, 3)]
            for i in range(1, cfg.single_frame_depth - 2):
                self.single_convs.append(b.conv(f"single.conv{i:02d}", C, C, 3))
            self.single_up = b.conv("single.up", cfg.scale ** 2 * cfg.in_channels, C, 3)
            self.single_out = b.conv("single.out", cfg.in_channels, cfg.in_channels, 3,
                                     init=head_init)

        self.fe_conv = b.conv("fe.conv0", C, cfg.in_channels, 3)
        self.fe_blocks = [
            ops.ResidualBlockParams(b.conv(f"fe.rb{i}.conv1", C, C, 3),
                                    b.conv(f"fe.rb{i}.conv2", C, C, 3))
            for i in range(cfg.num_residual_blocks)
        ]

        if cfg.use_alignment and cfg.temporal_radius > 0:
            # zero-init offsets: alignment starts as a plain convolution
            self.align_offset = b.conv("align.offset", 2 * K, 2 * C, 3, init="zero")
            self.align_deform = b.conv("align.deform", C, C, 3, padding=1)

        self.recon_tfuse = b.conv("recon.tfuse", C, cfg.num_frames * C, 1)
        self.recon_rdbs = []
        for i in range(cfg.num_rdb):
            layers = [b.conv(f"recon.rdb{i}.layer{j}", cfg.rdb_growth,
                             C + j * cfg.rdb_growth, 3) for j in range(RDB_LAYERS)]
            transition = b.conv(f"recon.rdb{i}.transition", C,
                                C + RDB_LAYERS * cfg.rdb_growth, 1)
            self.recon_rdbs.append(ops.ResidualDenseBlockParams(layers, transition))
        if cfg.use_attention:
            self.recon_ca = ops.ChannelAttentionParams(
                b.conv("recon.att.ca_squeeze", C // cfg.ca_reduction, C, 1),
                b.conv("recon.att.ca_excite", C, C // cfg.ca_reduction, 1))
            self.recon_sa = ops.SpatialAttentionParams(b.conv("recon.att.sa", 1, 2, 7))
        self.recon_up = b.conv("recon.up", cfg.scale ** 2 * C, C, 3)
        self.recon_out = b.conv("recon.out", cfg.in_channels, C, 3, init=head_init)

        if cfg.use_fusion:
            fusion_in = 2 * cfg.in_channels if cfg.use_single_frame else cfg.in_channels
            self.fusion_convs = [
                b.conv("fusion.conv1", C, fusion_in, 3),
                b.conv("fusion.conv2", C, C, 3),
                b.conv("fusion.conv3", cfg.in_channels, C, 3, init="zero"),
            ]

        if cfg.use_dual:
            self.dual_conv1 = b.conv("dual.conv1", C, cfg.in_channels, 3, stride=2, padding=0)
            self.dual_conv2 = b.conv("dual.conv2", cfg.in_channels, C, 3, stride=2, padding=0)

        self.params = b.tensors

    # -- sub-network forward paths ------------------------------------------

    def single_frame_branch(self, x):
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        h = x
        for cw in self.single_convs:
            h = ops.relu(ops.conv2d(h, cw))
        h = ops.conv2d(h, self.single_up)
        h = ops.pixel_shuffle(h, cfg.scale)
        return ops.conv2d(h, self.single_out)

    def extract_features(self, frames):
        feats = []
        for f in frames:
            h = ops.relu(ops.conv2d(f, self.fe_conv))
            for rb in self.fe_blocks:
                h = ops.residual_block(h, rb)
            feats.append(h)
        return feats

    def align_features(self, f_t, f_j):
        if f_t.shape != f_j.shape:
            raise ValueError("target and neighbor feature shapes differ")
        offsets = ops.conv2d(ops.concat([f_t, f_j], axis=1), self.align_offset)
        return ops.deformable_conv2d(f_j, offsets, self.align_deform)

    def reconstruct(self, aligned):
        cfg = self.config
        h = ops.conv2d(ops.concat(aligned, axis=1) if len(aligned) > 1 else aligned[0],
                       self.recon_tfuse)
        for rdb in self.recon_rdbs:
            h = ops.residual_dense_block(h, rdb)
        if cfg.use_attention:
            h = ops.mixed_attention(h, self.recon_ca, self.recon_sa)
        h = ops.conv2d(h, self.recon_up)
        h = ops.pixel_shuffle(h, cfg.scale)
        return ops.conv2d(h, self.recon_out)

    def fuse(self, i_res, i_single):
        if i_single is not None and i_res.shape != i_single.shape:
            raise ValueError("fusion inputs must share one shape")
        if not self.config.use_fusion:
            return elementwise(i_res, i_single, "add") if i_single is not None else i_res
        h = ops.concat([i_res, i_single], axis=1) if i_single is not None else i_res
        h = ops.relu(ops.conv2d(h, self.fusion_convs[0]))
        h = ops.relu(ops.conv2d(h, self.fusion_convs[1]))
        return ops.conv2d(h, self.fusion_convs[2])

    def forward(self, frames):
        """SR of the middle frame from a list of 2N+1 (B, 1, h, w) tensors."""
        cfg = self.config
        if len(frames) != cfg.num_frames:
            raise ValueError(f"expected {cfg.num_frames} frames, got {len(frames)}")
        shape = frames[0].shape
        if any(f.shape != shape for f in frames):
            raise ValueError("all frames must share one shape")
        t = cfg.temporal_radius
        target = frames[t]
        B, _, h, w = shape
        base = ops.bilinear_resize(target, cfg.scale * h, cfg.scale * w)

        feats = self.extract_features(frames)
        aligned = []
        for j, fj in enumerate(feats):
            if j == t or not cfg.use_alignment or cfg.temporal_radius == 0:
                aligned.append(fj)
            else:
                aligned.append(self.align_features(feats[t], fj))
        i_res = self.reconstruct(aligned)

        i_single = self.single_frame_branch(target) if cfg.use_single_frame else None
        fused = self.fuse(i_res, i_single)
        return elementwise(fused, base, "add")

    def dual_forward(self, sr):
        """Training-only map from HR back to LR space (two stride-2 convs)."""
        if not self.config.use_dual:
            raise ValueError("dual network is disabled in this config")
        _, _, H, W = sr.shape
        if H % 4 != 0 or W % 4 != 0:
            raise ValueError(f"HR extents {(H, W)} must be divisible by 4")
        h = ops.zero_pad2d(sr, 1, 0, 1, 0)
        h = ops.relu(ops.conv2d(h, self.dual_conv1))
        h = ops.zero_pad2d(h, 1, 0, 1, 0)
        return ops.conv2d(h, self.dual_conv2)

    # -- bookkeeping ---------------------------------------------------------

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def param_count(self):
        """Element counts keyed by sub-network, plus the total."""
        groups = {}
        for name, t in self.params.items():
            groups[_group_of(name)] = groups.get(_group_of(name), 0) + t.size
        groups["total"] = sum(t.size for t in self.params.values())
        return groups


def _group_of(name):
    if name.startswith("recon.att."):
        return "attention"
    head = name.split(".", 1)[0]
    return {
        "single": "single_frame",
        "fe": "feature_extraction",
        "align": "alignment",
        "recon": "reconstruction",
        "fusion": "fusion",
        "dual": "dual",
    }[head]


def forward_tiled(model, frames_np, tile=64, overlap=8):
    """Full-frame inference by overlapping LR tiles, seams averaged.

    ``frames_np`` is (T, 1, h, w); returns the (h*s, w*s) SR image as numpy.
    Memory-bounded alternative to a whole-frame forward pass.
    """
    cfg = model.config
    s = cfg.scale
    T, _, h, w = frames_np.shape
    out = np.zeros((h * s, w * s), dtype=np.float64)
    weight = np.zeros_like(out)
    step = tile - overlap
    ys = sorted({min(y, max(h - tile, 0)) for y in range(0, h, step)})
    xs = sorted({min(x, max(w - tile, 0)) for x in range(0, w, step)})
    for y in ys:
        for x in xs:
            th, tw = min(tile, h), min(tile, w)
            patch = frames_np[:, :, y:y + th, x:x + tw]
            tensors = [Tensor(patch[i][None]) for i in range(T)]
            sr = model.forward(tensors).data[0, 0].astype(np.float64)
            out[y * s:(y + th) * s, x * s:(x + tw) * s] += sr
            weight[y * s:(y + th) * s, x * s:(x + tw) * s] += 1.0
    return out / weight


def super_resolve_frame(model, frames_np, tile_threshold=128):
    """SR one frame stack (T, 1, h, w) -> (h*s, w*s) numpy, tiling large frames."""
    _, _, h, w = frames_np.shape
    if max(h, w) > tile_threshold:
        return forward_tiled(model, frames_np)
    tensors = [Tensor(frames_np[i][None]) for i in range(frames_np.shape[0])]
    return model.forward(tensors).data[0, 0].astype(np.float64)
