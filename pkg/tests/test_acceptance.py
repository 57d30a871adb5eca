"""Release gate: eight end-to-end checks, one verdict line each.

Each test prints "[criterion N] <name>: PASS" on success; a failure raises
normally and prints FAIL, so the console log always carries one line per
criterion.
"""

import functools
import os
import time

import numpy as np
import pytest

from vsr360.autodiff import Tape, Tensor, backward, elementwise, tsum
from vsr360.checkpoint import load_checkpoint, save_checkpoint
from vsr360.cli import main
from vsr360.data import make_sample_dataset
from vsr360.losses import latitude_weights, total_loss_components, wmse
from vsr360.metrics import latitude_uniform, psnr, ssim, ssim_map, weighted_mse, ws_psnr
from vsr360.model import SmfnConfig, SmfnModel
from vsr360.ops import (ChannelAttentionParams, ConvWeights, OffsetField,
                        ResidualBlockParams, ResidualDenseBlockParams,
                        bilinear_resize, channel_attention, conv2d,
                        deformable_conv2d, mixed_attention, pixel_shuffle,
                        pixel_unshuffle, relu, residual_block,
                        residual_dense_block, sigmoid, spatial_attention)
from vsr360.optim import AdamState
from vsr360.training import TrainConfig, evaluate, train

from conftest import gradcheck, t64
from test_losses_metrics import ssim_at
from test_ops import _cw, _rdb_params


def _verdict(n, name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[criterion {n}] {name}: FAIL")
                raise
            print(f"\n[criterion {n}] {name}: PASS")
        return wrapper
    return deco


@_verdict(1, "gradient suite")
def test_criterion_1_gradient_suite(rng):
    started = time.monotonic()

    x = t64(rng.standard_normal((1, 2, 5, 5)))
    w = _cw(rng, 3, 2, 3)
    gradcheck(lambda: tsum(elementwise(conv2d(x, w), conv2d(x, w), "mul")),
              [x, w.kernel, w.bias])

    off = t64(rng.standard_normal((1, 18, 5, 5)) * 0.6)
    wd = _cw(rng, 2, 2, 3)
    xd = t64(rng.standard_normal((1, 2, 5, 5)))
    gradcheck(lambda: tsum(elementwise(deformable_conv2d(xd, off, wd),
                                       deformable_conv2d(xd, off, wd), "mul")),
              [xd, off, wd.kernel, wd.bias])

    xa = t64(rng.standard_normal(40) * 2)
    gradcheck(lambda: tsum(elementwise(relu(xa), sigmoid(xa), "mul")), [xa])

    xp = t64(rng.standard_normal((1, 4, 3, 3)))
    gradcheck(lambda: tsum(elementwise(pixel_shuffle(xp, 2),
                                       pixel_shuffle(xp, 2), "mul")), [xp])

    xr = t64(rng.standard_normal((1, 1, 4, 5)))
    gradcheck(lambda: tsum(elementwise(bilinear_resize(xr, 7, 9),
                                       bilinear_resize(xr, 7, 9), "mul")), [xr])

    xm = t64(rng.standard_normal((1, 4, 5, 5)))
    ca = ChannelAttentionParams(_cw(rng, 2, 4, 1), _cw(rng, 4, 2, 1))
    from vsr360.ops import SpatialAttentionParams
    sa = SpatialAttentionParams(_cw(rng, 1, 2, 7))
    gradcheck(lambda: tsum(elementwise(mixed_attention(xm, ca, sa),
                                       mixed_attention(xm, ca, sa), "mul")),
              [xm, ca.squeeze.kernel, ca.excite.kernel, sa.conv.kernel])

    xb = t64(rng.standard_normal((1, 3, 4, 4)))
    rb = ResidualBlockParams(_cw(rng, 3, 3, 3), _cw(rng, 3, 3, 3))
    gradcheck(lambda: tsum(elementwise(residual_block(xb, rb),
                                       residual_block(xb, rb), "mul")),
              [xb, rb.conv1.kernel, rb.conv2.kernel])

    xdb = t64(rng.standard_normal((1, 8, 4, 4)))
    rdb = _rdb_params(rng, 8, 4)
    gradcheck(lambda: tsum(elementwise(residual_dense_block(xdb, rdb),
                                       residual_dense_block(xdb, rdb), "mul")),
              [xdb, rdb.layers[0].kernel, rdb.transition.kernel])

    sr = t64(rng.standard_normal((2, 1, 6, 6)))
    hr = Tensor(rng.standard_normal((2, 1, 6, 6)))
    gradcheck(lambda: wmse(sr, hr, latitude_weights(6, 6).w), [sr])

    # full tiny model, all sub-networks on, total (primary + dual) loss
    cfg = SmfnConfig(scale=4, temporal_radius=1, base_width=4,
                     num_residual_blocks=1, num_rdb=1, rdb_growth=2,
                     single_frame_depth=3, ca_reduction=2)
    model = SmfnModel(cfg, seed=0, dtype=np.float64)
    for t in model.params.values():
        t.data = t.data + rng.standard_normal(t.shape) * 0.05
    frames = [t64(rng.standard_normal((1, 1, 4, 4)) * 0.3) for _ in range(3)]
    hr = Tensor(rng.standard_normal((1, 1, 16, 16)))
    hw, lw = latitude_weights(16, 16).w, latitude_weights(4, 4).w

    def model_loss():
        srp = model.forward(frames)
        dual = model.dual_forward(srp)
        return total_loss_components(srp, hr, frames[1], dual, 0.1, hw, lw)[0]

    wrt = [frames[0], frames[1],
           model.params["fe.conv0.kernel"],
           model.params["align.offset.bias"],
           model.params["align.deform.kernel"],
           model.params["recon.rdb0.layer0.kernel"],
           model.params["recon.att.ca_squeeze.kernel"],
           model.params["recon.att.sa.kernel"],
           model.params["recon.up.bias"],
           model.params["single.out.kernel"],
           model.params["fusion.conv3.kernel"],
           model.params["dual.conv1.kernel"]]
    gradcheck(model_loss, wrt)

    elapsed = time.monotonic() - started
    assert elapsed <= 120.0, f"gradient suite took {elapsed:.1f} s"


@_verdict(2, "reduction oracles")
def test_criterion_2_reduction_oracles(rng):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = _cw(rng, 2, 3, 3, dtype=np.float64)
    zero_off = OffsetField(Tensor(np.zeros((2, 18, 6, 6))))
    diff = np.abs(deformable_conv2d(x, zero_off, w).data - conv2d(x, w).data)
    assert diff.max() <= 1e-6

    sr = rng.uniform(0, 255, (12, 14))
    hr = rng.uniform(0, 255, (12, 14))
    uni = latitude_uniform(12, 14)
    assert abs(weighted_mse(sr, hr, uni.w) - np.mean((sr - hr) ** 2)) <= 1e-9
    assert abs(ws_psnr(sr, hr, uni) - psnr(sr, hr)) <= 1e-9

    srs = rng.uniform(0, 255, (14, 14))
    hrs = srs + rng.normal(0, 10, (14, 14))
    m = ssim_map(srs, hrs)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            assert abs(m[i, j] - ssim_at(srs, hrs, i, j)) <= 1e-6

    xs = rng.standard_normal((2, 12, 5, 7))
    rt = pixel_unshuffle(pixel_shuffle(Tensor(xs), 2), 2).data
    np.testing.assert_array_equal(rt, xs)


@_verdict(3, "latitude weight vector")
def test_criterion_3_latitude_weights():
    for n in (2, 4, 5, 16, 33, 128):
        w = latitude_weights(n, 4).w
        np.testing.assert_array_equal(w, w[::-1])
    np.testing.assert_allclose(latitude_weights(4, 4).w,
                               [0.3826834, 0.9238795, 0.9238795, 0.3826834],
                               atol=1e-6)
    assert latitude_weights(5, 4).w[2] == 1.0


@_verdict(4, "zero-residual identity")
def test_criterion_4_zero_residual_identity(rng):
    variants = [dict(), dict(use_fusion=False), dict(use_single_frame=False),
                dict(use_attention=False), dict(use_alignment=False),
                dict(temporal_radius=0)]
    for extra in variants:
        cfg = SmfnConfig(scale=4, base_width=8, num_residual_blocks=1,
                         num_rdb=1, rdb_growth=4, single_frame_depth=3,
                         ca_reduction=4, **extra)
        model = SmfnModel(cfg, seed=13)
        frames = [Tensor(rng.standard_normal((2, 1, 6, 6)).astype(np.float32))
                  for _ in range(cfg.num_frames)]
        out = model.forward(frames).data
        base = bilinear_resize(frames[cfg.temporal_radius], 24, 24).data
        assert np.abs(out - base).max() <= 1e-6


@_verdict(5, "single-clip overfit")
def test_criterion_5_overfit(tmp_path):
    started = time.monotonic()
    data = tmp_path / "data"
    make_sample_dataset(data, clips=1, frames=8, width=256, height=128, seed=5)
    mcfg = SmfnConfig(scale=4, base_width=8, num_residual_blocks=1, num_rdb=1,
                      rdb_growth=16, single_frame_depth=5, ca_reduction=4,
                      use_dual=False)
    tcfg = TrainConfig(model=mcfg, epochs=1, steps_per_epoch=500, batch_size=12,
                       patch=16, initial_lr=1e-3, seed=0)
    ckpt = train(tcfg, data, tmp_path / "run")

    log = np.genfromtxt(tmp_path / "run" / "train_log.csv",
                        delimiter=",", names=True)
    initial = log["loss_primary"][0]
    final = log["loss_primary"][-10:].mean()
    assert final <= 0.1 * initial, f"loss only fell {initial:.3e} -> {final:.3e}"

    report = evaluate(ckpt, data, tmp_path / "report.json")
    model_db = report["average"]["ws_psnr"]
    bicubic_db = report["bicubic_average"]["ws_psnr"]
    assert model_db >= bicubic_db + 1.0, \
        f"model {model_db:.2f} dB vs bicubic {bicubic_db:.2f} dB"

    elapsed = time.monotonic() - started
    assert elapsed <= 300.0, f"overfit run took {elapsed:.1f} s"


@_verdict(6, "ablation parameter structure")
def test_criterion_6_ablation_structure():
    full = SmfnModel(SmfnConfig(), seed=0).param_count()
    drops = {}
    for flag, group in [("use_attention", "attention"),
                        ("use_alignment", "alignment"),
                        ("use_dual", "dual"),
                        ("use_fusion", "fusion"),
                        ("use_single_frame", "single_frame")]:
        reduced = SmfnModel(SmfnConfig(**{flag: False}), seed=0).param_count()
        assert group in full and group not in reduced
        assert reduced["total"] < full["total"]
        drops[flag] = full["total"] - reduced["total"]
    assert max(drops, key=drops.get) == "use_single_frame", drops


@_verdict(7, "pipeline determinism")
def test_criterion_7_pipeline_determinism(tmp_path):
    cfg_text = (
        "scale = 4\nbase_width = 8\nnum_residual_blocks = 1\nnum_rdb = 1\n"
        "rdb_growth = 4\nsingle_frame_depth = 3\nca_reduction = 4\n"
        "epochs = 1\nsteps_per_epoch = 50\nbatch_size = 2\npatch = 4\n"
        "initial_lr = 1e-3\nseed = 0\n")
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(cfg_text)
    outputs = []
    for tag in ("a", "b"):
        data = str(tmp_path / f"data_{tag}")
        run = str(tmp_path / f"run_{tag}")
        report = str(tmp_path / f"report_{tag}.json")
        assert main(["prepare", "--synthetic", "--clips", "1", "--frames", "4",
                     "--size", "64x32", "--out", data, "--seed", "7"]) == 0
        assert main(["train", "--config", str(cfg), "--data", data,
                     "--out", run]) == 0
        ck = os.path.join(run, "checkpoint_final.smfn")
        assert main(["eval", "--checkpoint", ck, "--data", data,
                     "--report", report]) == 0
        outputs.append((open(ck, "rb").read(), open(report, "rb").read()))
    assert outputs[0][0] == outputs[1][0], "checkpoints differ between runs"
    assert outputs[0][1] == outputs[1][1], "eval reports differ between runs"

    import json
    report = json.loads(outputs[0][1])
    for clip in report["clips"]:
        assert len(clip["frames"]) == 4
        for fr in clip["frames"]:
            assert "ws_psnr" in fr and "ws_psnr" in fr["bicubic"]


@_verdict(8, "default hyperparameters")
def test_criterion_8_default_hyperparameters(tmp_path):
    cfg = SmfnConfig()
    path = tmp_path / "defaults.smfn"
    save_checkpoint(path, cfg, {})
    loaded, _, _ = load_checkpoint(path)
    assert loaded.scale == 4
    assert loaded.temporal_radius == 1
    assert loaded.base_width == 64
    assert loaded.num_residual_blocks == 3
    assert loaded.num_rdb == 5
    assert loaded.rdb_growth == 32
    assert loaded.single_frame_depth == 32
    assert loaded.lambda_dual == 0.1

    tcfg = TrainConfig()
    assert tcfg.patch == 32
    assert tcfg.batch_size == 16
    assert tcfg.initial_lr == 1e-4
    assert tcfg.lr_halving_period_epochs == 20

    adam = AdamState()
    assert (adam.beta1, adam.beta2) == (0.9, 0.999)
