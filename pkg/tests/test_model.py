import numpy as np
import pytest

from vsr360.autodiff import Tape, Tensor, backward
from vsr360.checkpoint import (FORMAT_VERSION, MAGIC, load_checkpoint,
                               save_checkpoint)
from vsr360.model import (SmfnConfig, SmfnModel, forward_tiled,
                          super_resolve_frame)
from vsr360.ops import bilinear_resize
from vsr360.optim import init_adam


def toy_config(**overrides):
    base = dict(scale=2, temporal_radius=1, base_width=8, num_residual_blocks=1,
                num_rdb=1, rdb_growth=4, single_frame_depth=5, ca_reduction=4)
    base.update(overrides)
    return SmfnConfig(**base)


def frame_stack(rng, cfg, batch=1, h=6, w=8):
    return [Tensor(rng.standard_normal((batch, cfg.in_channels, h, w)).astype(np.float32))
            for _ in range(cfg.num_frames)]


class TestConfig:
    def test_defaults(self):
        cfg = SmfnConfig()
        assert cfg.scale == 4
        assert cfg.num_frames == 3
        assert cfg.lambda_dual == 0.1
        assert all([cfg.use_attention, cfg.use_alignment, cfg.use_dual,
                    cfg.use_fusion, cfg.use_single_frame])

    def test_validation(self):
        with pytest.raises(ValueError):
            SmfnConfig(scale=0)
        with pytest.raises(ValueError):
            SmfnConfig(temporal_radius=-1)
        with pytest.raises(ValueError):
            SmfnConfig(single_frame_depth=2)
        with pytest.raises(ValueError, match="divisible"):
            SmfnConfig(base_width=6, ca_reduction=4)

    def test_dict_roundtrip(self):
        cfg = toy_config(use_dual=False)
        assert SmfnConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_output_shape(self, rng):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=3)
        frames = frame_stack(rng, cfg, batch=2, h=6, w=8)
        out = model.forward(frames)
        assert out.shape == (2, 1, 12, 16)

    def test_fresh_model_is_bilinear(self, rng):
        # every residual head is zero-initialized, so an untrained model
        # reproduces bilinear upsampling of the target frame exactly
        cfg = toy_config()
        model = SmfnModel(cfg, seed=7)
        frames = frame_stack(rng, cfg)
        out = model.forward(frames).data
        base = bilinear_resize(frames[1], 12, 16).data
        np.testing.assert_array_equal(out, base)

    def test_fresh_model_is_bilinear_all_ablations(self, rng):
        for flag in ("use_attention", "use_alignment", "use_fusion", "use_single_frame"):
            cfg = toy_config(**{flag: False})
            model = SmfnModel(cfg, seed=7)
            frames = frame_stack(rng, cfg)
            out = model.forward(frames).data
            base = bilinear_resize(frames[1], 12, 16).data
            np.testing.assert_array_equal(out, base)

    def test_seed_determinism(self, rng):
        cfg = toy_config()
        a, b = SmfnModel(cfg, seed=11), SmfnModel(cfg, seed=11)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        c = SmfnModel(cfg, seed=12)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data)
                   for n in a.params)

    def test_frame_count_mismatch_rejected(self, rng):
        cfg = toy_config()
        model = SmfnModel(cfg)
        with pytest.raises(ValueError, match="frames"):
            model.forward(frame_stack(rng, cfg)[:2])

    def test_frame_shape_mismatch_rejected(self, rng):
        cfg = toy_config()
        model = SmfnModel(cfg)
        frames = frame_stack(rng, cfg)
        frames[2] = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="shape"):
            model.forward(frames)

    def test_single_frame_radius_zero(self, rng):
        cfg = toy_config(temporal_radius=0)
        model = SmfnModel(cfg, seed=5)
        out = model.forward(frame_stack(rng, cfg))
        assert out.shape == (1, 1, 12, 16)
        assert "alignment" not in model.param_count()

    def test_backward_reaches_all_trained_params(self, rng):
        # one step of gradient flow touches every non-dual parameter
        cfg = toy_config()
        model = SmfnModel(cfg, seed=2)
        frames = frame_stack(rng, cfg, h=4, w=4)
        model.zero_grad()
        with Tape() as tape:
            out = model.forward(frames)
            sq = out * out
            from vsr360.autodiff import tsum
            loss = tsum(sq)
        backward(tape, loss)
        missing = [n for n, t in model.params.items()
                   if not n.startswith("dual.") and t.grad is None]
        assert missing == []


class TestDualNetwork:
    def test_output_extents_quartered(self, rng):
        model = SmfnModel(toy_config(), seed=1)
        sr = Tensor(rng.standard_normal((2, 1, 16, 24)).astype(np.float32))
        out = model.dual_forward(sr)
        assert out.shape == (2, 1, 4, 6)

    def test_indivisible_extents_rejected(self, rng):
        model = SmfnModel(toy_config(), seed=1)
        with pytest.raises(ValueError, match="divisible"):
            model.dual_forward(Tensor(np.zeros((1, 1, 10, 12), dtype=np.float32)))

    def test_disabled_config_raises(self):
        model = SmfnModel(toy_config(use_dual=False), seed=1)
        with pytest.raises(ValueError, match="dual"):
            model.dual_forward(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)))


class TestParamCount:
    def test_total_is_group_sum(self):
        counts = SmfnModel(toy_config(), seed=0).param_count()
        total = counts.pop("total")
        assert total == sum(counts.values())

    def test_every_flag_removes_its_group(self):
        flag_to_group = {
            "use_attention": "attention",
            "use_alignment": "alignment",
            "use_dual": "dual",
            "use_fusion": "fusion",
            "use_single_frame": "single_frame",
        }
        full = SmfnModel(toy_config(), seed=0).param_count()
        for flag, group in flag_to_group.items():
            assert group in full
            reduced = SmfnModel(toy_config(**{flag: False}), seed=0).param_count()
            assert group not in reduced
            assert reduced["total"] < full["total"]

    def test_attention_counted_separately_from_reconstruction(self):
        counts = SmfnModel(toy_config(), seed=0).param_count()
        no_att = SmfnModel(toy_config(use_attention=False), seed=0).param_count()
        assert counts["reconstruction"] == no_att["reconstruction"]


class TestCheckpoint:
    def test_roundtrip_preserves_everything(self, rng, tmp_path):
        cfg = toy_config(use_fusion=False)
        model = SmfnModel(cfg, seed=9)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, model.params)
        cfg2, tensors, adam = load_checkpoint(path)
        assert cfg2 == cfg
        assert adam is None
        assert sorted(tensors) == sorted(model.params)
        for name in tensors:
            np.testing.assert_array_equal(tensors[name], model.params[name].data)

    def test_restored_model_forward_is_identical(self, rng, tmp_path):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=4)
        # perturb away from the zero heads so the test is not trivial
        for t in model.params.values():
            t.data = t.data + rng.standard_normal(t.shape).astype(np.float32) * 0.05
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, model.params)
        cfg2, tensors, _ = load_checkpoint(path)
        restored = SmfnModel(cfg2, tensors=tensors)
        frames = frame_stack(rng, cfg)
        np.testing.assert_array_equal(model.forward(frames).data,
                                      restored.forward(frames).data)

    def test_byte_deterministic(self, tmp_path):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=6)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, cfg, model.params)
        save_checkpoint(p2, cfg, model.params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_adam_state_roundtrip(self, rng, tmp_path):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=6)
        state = init_adam(model.params)
        state.t = 17
        for k in state.m:
            state.m[k] += rng.standard_normal(state.m[k].shape).astype(np.float32)
        path = tmp_path / "resume.ckpt"
        save_checkpoint(path, cfg, model.params, adam_state=state)
        _, _, adam = load_checkpoint(path)
        assert adam["t"] == 17
        for k in state.m:
            np.testing.assert_allclose(adam["m"][k], state.m[k], rtol=1e-6)
            np.testing.assert_array_equal(adam["v"][k], state.v[k])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, toy_config(), {})
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert int.from_bytes(raw[4:8], "little") == FORMAT_VERSION

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_shape_mismatch_on_load_rejected(self, tmp_path):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, model.params)
        _, tensors, _ = load_checkpoint(path)
        tensors["fe.conv0.kernel"] = tensors["fe.conv0.kernel"][:, :, :2, :2]
        with pytest.raises(ValueError, match="shape"):
            SmfnModel(cfg, tensors=tensors)


class TestTiledInference:
    def test_single_tile_matches_direct(self, rng):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=8)
        frames = rng.standard_normal((3, 1, 10, 12)).astype(np.float32)
        direct = super_resolve_frame(model, frames, tile_threshold=128)
        tiled = forward_tiled(model, frames, tile=16, overlap=4)
        np.testing.assert_allclose(tiled, direct, atol=1e-6)
        assert direct.shape == (20, 24)

    def test_tiling_close_to_direct_for_fresh_model(self, rng):
        # a fresh model is pure bilinear, where tile seams only disturb a
        # border band; the averaged result stays close to the direct pass
        cfg = toy_config()
        model = SmfnModel(cfg, seed=8)
        frames = rng.standard_normal((3, 1, 24, 24)).astype(np.float32)
        direct = super_resolve_frame(model, frames, tile_threshold=128)
        tiled = forward_tiled(model, frames, tile=16, overlap=8)
        assert np.mean(np.abs(tiled - direct)) < 0.2

    def test_threshold_switches_to_tiling(self, rng):
        cfg = toy_config()
        model = SmfnModel(cfg, seed=8)
        frames = rng.standard_normal((3, 1, 10, 12)).astype(np.float32)
        small = super_resolve_frame(model, frames, tile_threshold=8)
        assert small.shape == (20, 24)
        assert np.all(np.isfinite(small))
