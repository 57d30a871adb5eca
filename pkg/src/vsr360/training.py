"""Training loop, full-frame evaluation and inference."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np
from PIL import Image

from .autodiff import Tensor, Tape, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ClipDataset, load_manifest, rgb_to_ycbcr, ycbcr_to_rgb,
                   sample_patch_batch)
from .losses import latitude_weights, total_loss_components
from .metrics import frame_metrics
from .model import SmfnConfig, SmfnModel, super_resolve_frame
from .ops import bicubic_resize
from .optim import adam_step, init_adam, lr_schedule


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; the last good checkpoint stays on disk."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    model: SmfnConfig = field(default_factory=SmfnConfig)
    epochs: int = 10
    steps_per_epoch: int = 200
    batch_size: int = 16
    patch: int = 32
    initial_lr: float = 1e-4
    lr_halving_period_epochs: int = 20
    seed: int = 0
    checkpoint_every: int = 1   # epochs between checkpoint writes
    patch_latitude: bool = True  # weight patches by their true frame latitude

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size", "patch",
                     "lr_halving_period_epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model"}
_MODEL_KEYS = {f.name for f in fields(SmfnConfig)}


def parse_config_file(path):
    """Flat ``key = value`` text config covering TrainConfig and SmfnConfig keys."""
    train_kv, model_kv = {}, {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in _TRAIN_KEYS:
                train_kv[key] = _parse_value(val)
            elif key in _MODEL_KEYS:
                model_kv[key] = _parse_value(val)
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return TrainConfig(model=SmfnConfig(**model_kv), **train_kv)


def _parse_value(s):
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(s)
    except ValueError:
        return float(s)


def _batch_arrays(samples):
    frames = np.stack([s.lr_patch for s in samples], axis=1)  # (T, B, 1, p, p)
    hr = np.stack([s.hr_patch for s in samples])              # (B, 1, sp, sp)
    return frames, hr


def _batch_row_weights(samples, scale, patch, patch_latitude, lw_cache):
    """(hr_rows, lr_rows) raw latitude weights per sample, (B, H) each."""
    if not patch_latitude:
        hr_rows = latitude_weights(scale * patch, scale * patch).w
        lr_rows = latitude_weights(patch, patch).w
        return hr_rows, lr_rows
    hr_rows, lr_rows = [], []
    for s in samples:
        H = s.hr_frame_height
        if H not in lw_cache:
            lw_cache[H] = (latitude_weights(H, H).w,
                           latitude_weights(H // scale, H // scale).w)
        whr, wlr = lw_cache[H]
        o = s.hr_row_origin
        hr_rows.append(whr[o:o + scale * patch])
        lr_rows.append(wlr[o // scale:o // scale + patch])
    return np.stack(hr_rows), np.stack(lr_rows)


def train(cfg: TrainConfig, data_dir, out_dir):
    """Run the full training loop; returns the final checkpoint path."""
    manifest = load_manifest(os.path.join(data_dir, "manifest.json"))
    dataset = ClipDataset(manifest, data_dir)
    if not dataset.clips("train"):
        raise ValueError("manifest has no train clips")
    mcfg = cfg.model
    if manifest.scale != mcfg.scale:
        raise ValueError(f"manifest scale {manifest.scale} != model scale {mcfg.scale}")
    os.makedirs(out_dir, exist_ok=True)

    model = SmfnModel(mcfg, seed=cfg.seed)
    adam = init_adam(model.params)
    rng = np.random.default_rng(cfg.seed + 1)
    lw_cache = {}
    radius = mcfg.temporal_radius
    latest = os.path.join(out_dir, "checkpoint_latest.smfn")
    final = os.path.join(out_dir, "checkpoint_final.smfn")
    log_path = os.path.join(out_dir, "train_log.csv")

    with open(log_path, "w") as log:
        log.write("step,epoch,lr,loss_primary,loss_dual,loss_total\n")
        for step in range(cfg.epochs * cfg.steps_per_epoch):
            epoch = step // cfg.steps_per_epoch
            lr = lr_schedule(epoch, cfg.initial_lr, cfg.lr_halving_period_epochs)
            samples = sample_patch_batch(dataset, cfg.batch_size, cfg.patch,
                                         rng, radius=radius)
            frames_np, hr_np = _batch_arrays(samples)
            hr_rows, lr_rows = _batch_row_weights(samples, mcfg.scale, cfg.patch,
                                                  cfg.patch_latitude, lw_cache)
            with Tape() as tape:
                frames = [Tensor(frames_np[i]) for i in range(frames_np.shape[0])]
                sr = model.forward(frames)
                dual_out = model.dual_forward(sr) if mcfg.use_dual else None
                total, primary, dual = total_loss_components(
                    sr, Tensor(hr_np), frames[radius], dual_out,
                    mcfg.lambda_dual, hr_rows, lr_rows)
            total_v = total.item()
            if not np.isfinite(total_v):
                raise TrainingAborted(step, total_v)
            model.zero_grad()
            backward(tape, total)
            adam_step(model.params, adam, lr)
            dual_v = dual.item() if dual is not None else 0.0
            log.write(f"{step},{epoch},{lr:.8e},{primary.item():.8e},"
                      f"{dual_v:.8e},{total_v:.8e}\n")
            end_of_epoch = (step + 1) % cfg.steps_per_epoch == 0
            if end_of_epoch and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(latest, mcfg, model.params, adam)
    save_checkpoint(final, mcfg, model.params, adam)
    return final


def _clip_frame_stack(dataset, clip, t, radius):
    lrs = dataset.frames(clip, "lr")
    idxs = dataset.neighbor_indices(clip, t, radius)
    return lrs[idxs][:, None]  # (T, 1, h, w)


def evaluate(checkpoint_path, data_dir, report_path):
    """Full-frame metrics on the test clips (all clips if none are tagged test).

    Writes a JSON report with per-frame model and bicubic-baseline scores plus
    per-clip and overall averages; returns the report dict.
    """
    cfg, tensors, _ = load_checkpoint(checkpoint_path)
    model = SmfnModel(cfg, tensors=tensors)
    manifest = load_manifest(os.path.join(data_dir, "manifest.json"))
    if manifest.scale != cfg.scale:
        raise ValueError(f"manifest scale {manifest.scale} != checkpoint scale {cfg.scale}")
    dataset = ClipDataset(manifest, data_dir)
    clips = dataset.clips("test") or dataset.clips()

    report = {"scale": cfg.scale, "clips": [], "frame_count": 0}
    all_model, all_bicubic = [], []
    for clip in clips:
        lw = latitude_weights(clip.hr_height, clip.hr_width)
        hrs = dataset.frames(clip, "hr")
        lrs = dataset.frames(clip, "lr")
        frames_out, clip_model, clip_bicubic = [], [], []
        for t in range(clip.frames):
            stack = _clip_frame_stack(dataset, clip, t, cfg.temporal_radius)
            sr = super_resolve_frame(model, stack)
            sr8 = np.clip(np.round(sr * 255.0), 0, 255)
            gt = hrs[t].astype(np.float64) * 255.0
            bic = np.clip(np.round(bicubic_resize(lrs[t].astype(np.float64) * 255.0,
                                                  clip.hr_height, clip.hr_width)), 0, 255)
            m = frame_metrics(sr8, gt, lw)
            b = frame_metrics(bic, gt, lw)
            frames_out.append({"frame": t, **m, "bicubic": b})
            clip_model.append(m)
            clip_bicubic.append(b)
        report["clips"].append({
            "name": clip.name,
            "frame_count": clip.frames,
            "frames": frames_out,
            "average": _mean_metrics(clip_model),
            "bicubic_average": _mean_metrics(clip_bicubic),
        })
        all_model.extend(clip_model)
        all_bicubic.extend(clip_bicubic)
        report["frame_count"] += clip.frames
    report["average"] = _mean_metrics(all_model)
    report["bicubic_average"] = _mean_metrics(all_bicubic)
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def _mean_metrics(rows):
    keys = ("ws_psnr", "ws_ssim", "psnr", "ssim")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def infer(checkpoint_path, clip_dir, out_dir):
    """Upscale every frame in ``clip_dir``; grayscale frames stay grayscale,
    RGB frames get bicubically upscaled chroma back for display."""
    cfg, tensors, _ = load_checkpoint(checkpoint_path)
    model = SmfnModel(cfg, tensors=tensors)
    s = cfg.scale
    files = sorted(f for f in os.listdir(clip_dir)
                   if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
    if not files:
        raise ValueError(f"no frames found in {clip_dir}")
    planes, chroma = [], []
    for fn in files:
        try:
            img = Image.open(os.path.join(clip_dir, fn))
            img.load()
        except OSError as e:
            raise ValueError(f"unreadable frame {fn}: {e}") from None
        if img.mode == "L":
            planes.append(np.asarray(img, dtype=np.float64))
            chroma.append(None)
        else:
            y, cb, cr = rgb_to_ycbcr(np.asarray(img.convert("RGB")))
            planes.append(y)
            chroma.append((cb, cr))
    os.makedirs(out_dir, exist_ok=True)
    n = len(planes)
    radius = cfg.temporal_radius
    for t in range(n):
        idxs = [min(max(t + j, 0), n - 1) for j in range(-radius, radius + 1)]
        stack = np.stack([planes[i] for i in idxs])[:, None] / 255.0
        sr = super_resolve_frame(model, stack.astype(np.float32))
        sr8 = np.clip(np.round(sr * 255.0), 0, 255)
        out_path = os.path.join(out_dir, files[t])
        if chroma[t] is None:
            Image.fromarray(sr8.astype(np.uint8), mode="L").save(out_path)
        else:
            cb, cr = chroma[t]
            h, w = sr8.shape
            cb_up = bicubic_resize(cb, h, w)
            cr_up = bicubic_resize(cr, h, w)
            Image.fromarray(ycbcr_to_rgb(sr8, cb_up, cr_up), mode="RGB").save(out_path)
    return n
