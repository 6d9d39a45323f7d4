import numpy as np
import pytest

from mitoseg.checkpoint import load_checkpoint, save_checkpoint
from mitoseg.model import KernelDenoiser, ModelConfig, SegModel, count_parameters
from mitoseg.tensor import ShapeError, Tensor

from oracles import finite_difference, rel_err


def tiny_cfg(**kw):
    base = dict(channels=(2, 3, 4, 5), patch_shape=(4, 16, 16), attn_encoder=(False, False, True, True), attn_decoder=(True, False, False))
    base.update(kw)
    return ModelConfig(**base)


class TestConfigValidation:
    def test_patch_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_cfg(patch_shape=(4, 20, 16))

    def test_four_levels_required(self):
        with pytest.raises(ValueError, match="4"):
            tiny_cfg(channels=(2, 3, 4))

    def test_denoiser_enum(self):
        with pytest.raises(ValueError, match="denoiser"):
            tiny_cfg(denoiser="wavelet")

    def test_kernel_predict_needs_slices(self):
        with pytest.raises(ValueError, match="T >= 3"):
            tiny_cfg(denoiser="kernel-predict", patch_shape=(2, 16, 16))


class TestForward:
    def test_output_shapes_match_input(self):
        cfg = tiny_cfg()
        model = SegModel(cfg, seed=0)
        out = model(np.random.default_rng(0).random((4, 16, 16)))
        assert out.semantic_logits.shape == (4, 16, 16)
        assert out.boundary_logits.shape == (4, 16, 16)

    @pytest.mark.parametrize("shape", [(2, 8, 8), (4, 8, 16), (6, 24, 8)])
    def test_randomized_divisible_shapes(self, shape):
        cfg = tiny_cfg(patch_shape=shape, attn_encoder=(False, False, False, True), attn_decoder=(False, False, False))
        model = SegModel(cfg, seed=1)
        out = model(np.random.default_rng(1).random(shape))
        assert out.semantic_logits.shape == shape

    def test_shape_mismatch_rejected(self):
        model = SegModel(tiny_cfg(), seed=0)
        with pytest.raises(ShapeError, match="patch shape"):
            model(np.zeros((4, 16, 8)))

    def test_forward_deterministic(self):
        model = SegModel(tiny_cfg(), seed=2)
        x = np.random.default_rng(3).random((4, 16, 16))
        a = model(x).semantic_logits.data
        b = model(x).semantic_logits.data
        assert np.array_equal(a, b)

    def test_gradients_reach_every_parameter(self):
        cfg = tiny_cfg(denoiser="kernel-predict")
        model = SegModel(cfg, seed=4)
        out = model(np.random.default_rng(5).random((4, 16, 16)))
        (out.semantic_logits.sum() + out.boundary_logits.sum()).backward()
        missing = [n for n, p in model.parameters() if p.grad is None]
        assert not missing, f"parameters without grad: {missing}"

    def test_skip_wiring(self):
        assert SegModel.skip_pairs == ((0, 2), (1, 1), (2, 0))
        cfg = tiny_cfg()
        model = SegModel(cfg, seed=0)
        assert len(model.enc) == 4 and len(model.dec) == 3
        for i in range(3):
            enc_width = cfg.channels[i]
            dec_in = model.dec[2 - i].conv1.weight.shape[1]
            assert dec_in == 2 * enc_width  # upsampled path concat with one skip


class TestCountParameters:
    def test_zero_width_config_counts_zero(self):
        cfg = tiny_cfg(channels=(0, 0, 0, 0), attn_encoder=(False,) * 4, attn_decoder=(False,) * 3)
        assert count_parameters(cfg) == 0

    def test_doubling_widths_scales_conv_weights_4x(self):
        cfg1 = tiny_cfg(attn_encoder=(False,) * 4, attn_decoder=(False,) * 3)
        cfg2 = tiny_cfg(channels=tuple(2 * c for c in cfg1.channels), attn_encoder=(False,) * 4, attn_decoder=(False,) * 3)
        m1, m2 = SegModel(cfg1, seed=0), SegModel(cfg2, seed=0)
        p1, p2 = dict(m1.parameters()), dict(m2.parameters())
        for name, t1 in p1.items():
            t2 = p2[name]
            if name.endswith("weight") and t1.data.ndim == 5:
                o1, c1 = t1.shape[:2]
                o2, c2 = t2.shape[:2]
                expect = (o2 / max(o1, 1)) * (c2 / max(c1, 1))
                assert t2.size == t1.size * expect
                # interior convs double both extents: exactly 4x
                if c1 > 1 and o1 > 1:
                    assert t2.size == 4 * t1.size

    def test_count_matches_checkpoint_manifest(self, tmp_path):
        model = SegModel(tiny_cfg(), seed=0)
        path = save_checkpoint(tmp_path / "ckpt.zip", [(n, p.data) for n, p in model.parameters()])
        arrays, _ = load_checkpoint(path)
        total = sum(a.size for a in arrays.values())
        assert total == model.num_parameters() == count_parameters(tiny_cfg())

    def test_stable_across_runs(self):
        assert count_parameters(tiny_cfg()) == count_parameters(tiny_cfg())


class TestDenoiser:
    def test_identity_mode_bit_identical(self):
        model = SegModel(tiny_cfg(denoiser="identity"), seed=0)
        x = Tensor(np.random.default_rng(6).random((4, 16, 16)))
        assert model.denoise(x) is x

    def test_delta_kernel_preserves_input(self):
        rng = np.random.default_rng(7)
        x = rng.random((1, 3, 1, 6, 6))
        kernels = np.zeros((1, 3, 1, 3, 3))
        kernels[0, 1, 0, 1, 1] = 1.0  # center tap of the current frame
        out = KernelDenoiser.apply_kernels(Tensor(x), Tensor(kernels)).data
        assert np.abs(out[0, 0, 0] - x[0, 1, 0]).max() < 1e-12

    def test_predicted_kernels_sum_to_one(self):
        den = KernelDenoiser(np.random.default_rng(8))
        triplet = Tensor(np.random.default_rng(9).random((1, 3, 1, 8, 8)))
        k = den.predict_kernels(triplet)
        assert abs(k.data.sum() - 1.0) < 1e-12

    def test_constant_input_preserved(self):
        den = KernelDenoiser(np.random.default_rng(10))
        x = Tensor(np.full((4, 8, 8), 0.37))
        out = den(x).data
        assert np.abs(out - 0.37).max() < 1e-10

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        den = KernelDenoiser(rng, hidden=4)
        x = rng.random((3, 6, 6))

        def loss_value():
            return float((den(Tensor(x)).data ** 2).sum())

        (den(Tensor(x)) ** 2).sum().backward()
        for name, p in den.parameters():
            want = finite_difference(loss_value, p.data)
            assert rel_err(p.grad, want) < 1e-4, f"{name}: {rel_err(p.grad, want)}"
