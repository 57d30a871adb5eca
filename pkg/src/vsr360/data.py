"""Dataset preparation and training-batch sampling for ERP clips.

On disk a dataset is ``<root>/<clip>/hr/frame_%04d.png`` and
``<root>/<clip>/lr/frame_%04d.png`` (8-bit grayscale Y planes) plus
``<root>/manifest.json``.  Degradation follows a two-stage bicubic protocol:
the source is downscaled x2 to the ground truth, and the ground truth x4 to
the LR input, both with the antialiased bicubic kernel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .ops import bicubic_resize

MANIFEST_VERSION = 1
FRAME_PATTERN = "frame_%04d.png"


def rgb_to_ycbcr(image):
    """BT.601 studio-swing conversion of an 8-bit RGB image.

    Returns (y, cb, cr) float64 planes; Y is clamped to [16, 235].
    """
    img = np.asarray(image, dtype=np.float64) / 255.0
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    cb = 128.0 - 37.797 * r - 74.203 * g + 112.0 * b
    cr = 128.0 + 112.0 * r - 93.786 * g - 18.214 * b
    return np.clip(y, 16.0, 235.0), cb, cr


def ycbcr_to_rgb(y, cb, cr):
    """Inverse BT.601 studio-swing conversion, result clipped to 8-bit."""
    y = (np.asarray(y, dtype=np.float64) - 16.0) / 219.0
    cb = (np.asarray(cb, dtype=np.float64) - 128.0) / 224.0
    cr = (np.asarray(cr, dtype=np.float64) - 128.0) / 224.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    rgb = np.stack([r, g, b], axis=-1) * 255.0
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


@dataclass
class ClipEntry:
    name: str
    split: str
    frames: int
    hr_height: int
    hr_width: int
    lr_height: int
    lr_width: int
    hr_dir: str
    lr_dir: str
    source_crop: list | None = None  # [top, left, height, width] when cropped


@dataclass
class ClipManifest:
    scale: int
    clips: list = field(default_factory=list)
    format_version: int = MANIFEST_VERSION


def write_manifest(manifest: ClipManifest, path):
    with open(path, "w") as f:
        json.dump(asdict(manifest), f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path, check_files=True):
    with open(path) as f:
        raw = json.load(f)
    if raw.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unknown manifest version {raw.get('format_version')}")
    manifest = ClipManifest(scale=int(raw["scale"]),
                            clips=[ClipEntry(**c) for c in raw["clips"]],
                            format_version=raw["format_version"])
    root = os.path.dirname(os.path.abspath(path))
    for c in manifest.clips:
        if c.hr_height != manifest.scale * c.lr_height or c.hr_width != manifest.scale * c.lr_width:
            raise ValueError(f"clip {c.name}: HR extents are not scale x LR extents")
        if c.split not in ("train", "test"):
            raise ValueError(f"clip {c.name}: unknown split {c.split!r}")
        if c.frames < 1:
            raise ValueError(f"clip {c.name}: no frames")
        if check_files:
            for d in (c.hr_dir, c.lr_dir):
                for i in range(c.frames):
                    p = os.path.join(root, d, FRAME_PATTERN % i)
                    if not os.path.isfile(p):
                        raise ValueError(f"clip {c.name}: missing frame file {p}")
    return manifest


def load_frame(path):
    """8-bit grayscale frame as float64 in [0, 255]."""
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64)


def save_frame(path, plane):
    arr = np.clip(np.round(np.asarray(plane)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _center_crop_divisible(frames, divisor):
    H, W = frames[0].shape
    Hc, Wc = H - H % divisor, W - W % divisor
    if (Hc, Wc) == (H, W):
        return frames, None
    top, left = (H - Hc) // 2, (W - Wc) // 2
    return [f[top:top + Hc, left:left + Wc] for f in frames], [top, left, Hc, Wc]


def degrade_clip(source_frames, scale_gt=2, scale_lr=4):
    """Two-stage bicubic degradation: source -> GT (/scale_gt) -> LR (/scale_lr).

    Frames are quantized to the 8-bit grid after each stage (they are stored
    as PNGs).  Sources with extents not divisible by scale_gt*scale_lr are
    center-cropped first; the crop window is returned for the manifest.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in source_frames]
    frames, crop = _center_crop_divisible(frames, scale_gt * scale_lr)
    H, W = frames[0].shape
    gt = [_quantize(bicubic_resize(f, H // scale_gt, W // scale_gt)) for f in frames]
    lr = [_quantize(bicubic_resize(g, H // (scale_gt * scale_lr), W // (scale_gt * scale_lr)))
          for g in gt]
    return gt, lr, crop


def _quantize(plane):
    return np.clip(np.round(plane), 0, 255).astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic sample clips
# ---------------------------------------------------------------------------

def _render_erp_frame(t, H, W, spec):
    """One synthetic ERP frame: latitude gradient, drifting Gaussian blobs and
    integer-frequency sinusoids, all periodic in longitude."""
    j = np.arange(H, dtype=np.float64)[:, None]
    x = np.arange(W, dtype=np.float64)[None, :]
    lat = (j + 0.5 - H / 2.0) * np.pi / H
    lon = 2.0 * np.pi * x / W

    img = 110.0 + 55.0 * np.cos(lat)
    for k, amp, phase, speed, vk in spec["waves"]:
        img = img + amp * np.sin(k * lon + phase + speed * t) * np.cos(vk * lat)
    for cy, cx_frac, sigma, amp, speed in spec["blobs"]:
        cx = (cx_frac + speed * t) * W
        dx = (x - cx + W / 2.0) % W - W / 2.0
        dyy = j - cy * H
        img = img + amp * np.exp(-(dx ** 2 + dyy ** 2) / (2.0 * (sigma * W) ** 2))
    return np.clip(np.round(img), 16, 235).astype(np.float64)


def _clip_render_spec(rng):
    # longitude frequencies run up to the LR Nyquist band so the degradation
    # actually destroys detail; blobs are small enough to alias when downscaled
    waves = [(int(rng.integers(6, 17)), float(rng.uniform(12, 26)),
              float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0.05, 0.3)),
              int(rng.integers(1, 6))) for _ in range(6)]
    blobs = [(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0, 1)),
              float(rng.uniform(0.02, 0.05)), float(rng.uniform(25, 55)),
              float(rng.uniform(-0.02, 0.02))) for _ in range(4)]
    return {"waves": waves, "blobs": blobs}


def make_sample_dataset(out_dir, clips=2, frames=8, width=256, height=128,
                        seed=0, test_clips=0, scale_gt=2, scale_lr=4):
    """Procedurally rendered stand-in dataset.

    ``width`` x ``height`` are the ground-truth (HR) extents; the synthetic
    source is rendered at scale_gt times that and run through degrade_clip.
    Deterministic per seed.  The last ``test_clips`` clips get the test split.
    """
    if width % 8 or height % 8:
        raise ValueError("extents must be divisible by 8")
    rng = np.random.default_rng(seed)
    manifest = ClipManifest(scale=scale_lr)
    os.makedirs(out_dir, exist_ok=True)
    for ci in range(clips):
        name = f"clip_{ci:03d}"
        spec = _clip_render_spec(rng)
        src = [_render_erp_frame(t, scale_gt * height, scale_gt * width, spec)
               for t in range(frames)]
        gt, lr, crop = degrade_clip(src, scale_gt, scale_lr)
        hr_dir, lr_dir = os.path.join(name, "hr"), os.path.join(name, "lr")
        os.makedirs(os.path.join(out_dir, hr_dir), exist_ok=True)
        os.makedirs(os.path.join(out_dir, lr_dir), exist_ok=True)
        for i, (g, l) in enumerate(zip(gt, lr)):
            save_frame(os.path.join(out_dir, hr_dir, FRAME_PATTERN % i), g)
            save_frame(os.path.join(out_dir, lr_dir, FRAME_PATTERN % i), l)
        manifest.clips.append(ClipEntry(
            name=name, split="test" if ci >= clips - test_clips else "train",
            frames=frames,
            hr_height=gt[0].shape[0], hr_width=gt[0].shape[1],
            lr_height=lr[0].shape[0], lr_width=lr[0].shape[1],
            hr_dir=hr_dir, lr_dir=lr_dir, source_crop=crop))
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def prepare_from_source(source_dir, out_dir, scale_gt=2, scale_lr=4, test_clips=0):
    """Ingest pre-extracted frame images (one subdirectory per clip)."""
    clip_names = sorted(d for d in os.listdir(source_dir)
                        if os.path.isdir(os.path.join(source_dir, d)))
    if not clip_names:
        raise ValueError(f"no clip subdirectories in {source_dir}")
    manifest = ClipManifest(scale=scale_lr)
    os.makedirs(out_dir, exist_ok=True)
    for ci, name in enumerate(clip_names):
        cdir = os.path.join(source_dir, name)
        files = sorted(f for f in os.listdir(cdir)
                       if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
        src = []
        for fn in files:
            img = Image.open(os.path.join(cdir, fn))
            if img.mode == "L":
                src.append(np.asarray(img, dtype=np.float64))
            else:
                y, _, _ = rgb_to_ycbcr(np.asarray(img.convert("RGB")))
                src.append(y)
        gt, lr, crop = degrade_clip(src, scale_gt, scale_lr)
        hr_dir, lr_dir = os.path.join(name, "hr"), os.path.join(name, "lr")
        os.makedirs(os.path.join(out_dir, hr_dir), exist_ok=True)
        os.makedirs(os.path.join(out_dir, lr_dir), exist_ok=True)
        for i, (g, l) in enumerate(zip(gt, lr)):
            save_frame(os.path.join(out_dir, hr_dir, FRAME_PATTERN % i), g)
            save_frame(os.path.join(out_dir, lr_dir, FRAME_PATTERN % i), l)
        manifest.clips.append(ClipEntry(
            name=name, split="test" if ci >= len(clip_names) - test_clips else "train",
            frames=len(gt),
            hr_height=gt[0].shape[0], hr_width=gt[0].shape[1],
            lr_height=lr[0].shape[0], lr_width=lr[0].shape[1],
            hr_dir=hr_dir, lr_dir=lr_dir, source_crop=crop))
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

@dataclass
class PatchSample:
    lr_patch: np.ndarray     # (2N+1, 1, p, p), values in [0, 1]
    hr_patch: np.ndarray     # (1, s*p, s*p), values in [0, 1]
    hr_row_origin: int       # global HR row of the patch top edge
    augmentation: dict       # {"hflip": bool, "rot180": bool}
    hr_frame_height: int


class ClipDataset:
    """Frame cache over a prepared dataset directory."""

    def __init__(self, manifest: ClipManifest, root):
        self.manifest = manifest
        self.root = root
        self._cache = {}

    def clips(self, split=None):
        return [c for c in self.manifest.clips if split is None or c.split == split]

    def frames(self, clip: ClipEntry, kind):
        key = (clip.name, kind)
        if key not in self._cache:
            d = clip.hr_dir if kind == "hr" else clip.lr_dir
            stack = np.stack([
                load_frame(os.path.join(self.root, d, FRAME_PATTERN % i))
                for i in range(clip.frames)])
            self._cache[key] = (stack / 255.0).astype(np.float32)
        return self._cache[key]

    def neighbor_indices(self, clip: ClipEntry, t, radius):
        # clip edges replicate the edge frame
        return [min(max(t + j, 0), clip.frames - 1)
                for j in range(-radius, radius + 1)]


def apply_hflip(lr_patch, hr_patch):
    """Longitude flip; latitude weights are unaffected."""
    return lr_patch[..., ::-1].copy(), hr_patch[..., ::-1].copy()


def apply_rot180(lr_patch, hr_patch, hr_row_origin, hr_frame_height):
    """180-degree rotation; the HR row origin moves to the mirrored band."""
    new_origin = hr_frame_height - hr_row_origin - hr_patch.shape[-2]
    return (lr_patch[..., ::-1, ::-1].copy(),
            hr_patch[..., ::-1, ::-1].copy(),
            new_origin)


def sample_patch_batch(dataset: ClipDataset, batch_size, patch, rng,
                       radius=1, augment=True, split="train"):
    """Uniformly sampled LR/HR patch pairs with temporal context.

    Draws clip, target frame and LR crop origin uniformly; gathers 2N+1
    temporally consecutive LR crops at the same origin; applies horizontal
    reflection and 180-degree rotation each with probability 0.5.
    """
    clips = dataset.clips(split) or dataset.clips()
    s = dataset.manifest.scale
    samples = []
    for _ in range(batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        if patch > clip.lr_height or patch > clip.lr_width:
            raise ValueError(f"patch {patch} larger than LR frame "
                             f"({clip.lr_height}, {clip.lr_width})")
        t = int(rng.integers(clip.frames))
        y = int(rng.integers(clip.lr_height - patch + 1))
        x = int(rng.integers(clip.lr_width - patch + 1))
        lrs = dataset.frames(clip, "lr")
        hrs = dataset.frames(clip, "hr")
        idxs = dataset.neighbor_indices(clip, t, radius)
        lr_patch = lrs[idxs, y:y + patch, x:x + patch][:, None]
        hr_patch = hrs[t, s * y:s * (y + patch), s * x:s * (x + patch)][None]
        origin = s * y
        aug = {"hflip": False, "rot180": False}
        if augment:
            if rng.random() < 0.5:
                lr_patch, hr_patch = apply_hflip(lr_patch, hr_patch)
                aug["hflip"] = True
            if rng.random() < 0.5:
                lr_patch, hr_patch, origin = apply_rot180(
                    lr_patch, hr_patch, origin, clip.hr_height)
                aug["rot180"] = True
        samples.append(PatchSample(lr_patch=np.ascontiguousarray(lr_patch),
                                   hr_patch=np.ascontiguousarray(hr_patch),
                                   hr_row_origin=origin,
                                   augmentation=aug,
                                   hr_frame_height=clip.hr_height))
    return samples
