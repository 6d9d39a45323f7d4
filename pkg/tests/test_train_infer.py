import numpy as np
import pytest

from mitoseg.config import config_from_dict
from mitoseg.infer import _sigmoid, instance_scores, run_inference, sliding_window_probs
from mitoseg.model import ModelConfig, SegModel
from mitoseg.postproc import PostConfig
from mitoseg.tensor import ShapeError
from mitoseg.train import Trainer


def tiny_experiment(**overrides):
    raw = {
        "seed": 11,
        "iterations": 4,
        "batch_size": 1,
        "model": {
            "channels": [2, 3, 4, 5],
            "patch_shape": [4, 16, 16],
            "attn_encoder": [False, False, False, True],
            "attn_decoder": [False, False, False],
            "dtype": "f64",
        },
        "losses": {"lambda_adv": 0.5, "lambda_match": 0.1},
        "optimizer": {"lr": 1e-3},
        "data": {"synth": {"dims": [8, 32, 32], "instance_range": [2, 3], "axis_range_hw": [3.0, 5.5], "axis_range_t": [1.5, 2.5]}},
        "post": {"min_instance_size": 8},
    }
    raw.update(overrides)
    return config_from_dict(raw)


class TestTrainer:
    def test_losses_logged_and_finite(self):
        trainer = Trainer(tiny_experiment())
        history = trainer.train()
        assert len(history) == 4
        for rec in history:
            assert set(rec) == {"iter", "bce", "bce_boundary", "gen_loss", "disc_loss", "total"}
            assert all(np.isfinite(v) for v in rec.values())

    def test_same_seed_identical_histories(self):
        h1 = Trainer(tiny_experiment()).train()
        h2 = Trainer(tiny_experiment()).train()
        assert h1 == h2

    def test_different_seed_differs(self):
        h1 = Trainer(tiny_experiment()).train()
        h2 = Trainer(tiny_experiment(seed=12)).train()
        assert h1 != h2

    def test_disjoint_gradient_support(self):
        trainer = Trainer(tiny_experiment())
        trainer.step()
        # after the step both optimizers zeroed their grads; run the loss
        # build once more by hand to inspect supports
        from mitoseg.losses import fg_bg_adversarial_loss
        from mitoseg.tensor import Tensor, sigmoid

        img, lab = trainer.volume[:4, :16, :16], trainer.labels[:4, :16, :16]
        out = trainer.model(Tensor(img))
        probs = sigmoid(out.semantic_logits)
        gen_loss, disc_loss = fg_bg_adversarial_loss(img, probs, (lab > 0).astype(float), trainer.disc)
        disc_loss.backward()
        assert all(p.grad is None for _, p in trainer.model.parameters())
        assert all(p.grad is not None for _, p in trainer.disc.parameters())
        trainer.disc.zero_grad()
        gen_loss.backward()
        assert all(p.grad is None for _, p in trainer.disc.parameters())
        assert any(p.grad is not None for _, p in trainer.model.parameters())

    def test_checkpoint_resume_bit_identical(self, tmp_path):
        cfg = tiny_experiment(iterations=6)
        full = Trainer(cfg).train()

        cfg_half = tiny_experiment(iterations=3)
        t1 = Trainer(cfg_half, out_dir=tmp_path)
        t1.train()

        t2 = Trainer(tiny_experiment(iterations=6))
        t2.resume(tmp_path / "checkpoint.zip")
        tail = t2.train()
        assert [r["iter"] for r in tail] == [4, 5, 6]
        for a, b in zip(full[3:], tail):
            assert a == b, f"resume diverged at iter {b['iter']}"

    def test_lambda_zero_skips_discriminator(self):
        cfg = tiny_experiment(losses={"lambda_adv": 0.0})
        trainer = Trainer(cfg)
        rec = trainer.step()
        assert rec["gen_loss"] == 0.0 and rec["disc_loss"] == 0.0
        assert trainer.opt_d.t == 0


def frozen_model(patch=(4, 16, 16), seed=0):
    cfg = ModelConfig(channels=(2, 3, 4, 5), patch_shape=patch, attn_encoder=(False,) * 4, attn_decoder=(False,) * 3)
    return SegModel(cfg, seed=seed)


class TestSlidingWindow:
    def test_single_patch_no_blending(self):
        model = frozen_model()
        vol = np.random.default_rng(0).random((4, 16, 16))
        sem, bnd = sliding_window_probs(model, vol)
        out = model(vol)
        want = _sigmoid(out.semantic_logits.data)
        assert np.array_equal(sem, want)
        assert sem.shape == bnd.shape == vol.shape

    def test_blend_of_identical_windows_matches_interior(self):
        # every window emits the same constant field, so the weighted blend
        # must reproduce it (up to fp rounding in the normalization)
        from mitoseg.model import ModelOutput
        from mitoseg.tensor import Tensor

        class ConstantModel:
            cfg = ModelConfig(channels=(2, 3, 4, 5), patch_shape=(4, 16, 16), attn_encoder=(False,) * 4, attn_decoder=(False,) * 3)

            def __call__(self, x):
                logits = Tensor(np.full((4, 16, 16), 0.73))
                return ModelOutput(logits, logits)

        vol = np.zeros((8, 24, 40))
        sem, bnd = sliding_window_probs(ConstantModel(), vol)
        want = _sigmoid(np.array(0.73))
        assert np.abs(sem - want).max() < 1e-12
        assert np.abs(bnd - want).max() < 1e-12

    def test_volume_smaller_than_patch_rejected(self):
        model = frozen_model()
        with pytest.raises(ShapeError, match="smaller"):
            sliding_window_probs(model, np.zeros((2, 16, 16)))

    def test_full_coverage_weights(self):
        model = frozen_model()
        vol = np.random.default_rng(2).random((8, 24, 40))
        sem, _ = sliding_window_probs(model, vol)
        assert np.isfinite(sem).all()
        assert (sem > 0).all() and (sem < 1).all()

    def test_zero_weights_give_empty_labels(self):
        model = frozen_model()
        for _, p in model.parameters():
            p.data[:] = 0.0
        vol = np.random.default_rng(3).random((4, 16, 16))
        instances, scores, _, _ = run_inference(model, vol, PostConfig())
        assert instances.instance_count == 0
        assert scores.size == 0


class TestInstanceScores:
    def test_mean_probability_per_instance(self):
        labels = np.zeros((1, 4, 4), dtype=np.int32)
        labels[0, 0, :2] = 1
        labels[0, 3, 3] = 2
        sem = np.zeros((1, 4, 4))
        sem[0, 0, 0], sem[0, 0, 1] = 0.9, 0.7
        sem[0, 3, 3] = 0.6
        scores = instance_scores(labels, 2, sem)
        assert np.allclose(scores, [0.8, 0.6])
