"""Training loop: one generator update and one discriminator update per
iteration, JSON-lines metrics log, periodic checkpoints, deterministic given
the config seed, and bit-exact resume from a checkpoint.

Both losses are built and backpropagated before either optimizer steps, so
each update uses gradients evaluated at the iteration's starting weights;
the discriminator loss sees a detached mask and the generator loss runs the
discriminator frozen, keeping the two gradient supports disjoint.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import ExperimentConfig
from .data import augment, generate_synthetic, load_label_volume, load_volume, sample_patch
from .losses import Discriminator, bce_loss, boundary_target, fg_bg_adversarial_loss, total_loss
from .model import SegModel
from .optim import Adam
from .tensor import Tensor, sigmoid


class Trainer:
    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        seqs = np.random.SeedSequence(cfg.seed).spawn(4)
        self.dtype = cfg.model.np_dtype

        if cfg.data.synth is not None:
            self.volume, label_vol = generate_synthetic(cfg.data.synth, seqs[0])
            self.labels = label_vol.labels
        else:
            self.volume, _ = load_volume(cfg.data.volume)
            self.labels = load_label_volume(cfg.data.labels).labels
        self.volume = self.volume.astype(self.dtype)

        self.model = SegModel(cfg.model, seed=seqs[1])
        self.disc = Discriminator(rng=np.random.default_rng(seqs[2]), dtype=self.dtype)
        self.sampler_rng = np.random.default_rng(seqs[3])
        self.opt_g = Adam(self.model.parameters(), lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2, eps=cfg.optimizer.eps)
        self.opt_d = Adam(self.disc.parameters(), lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2, eps=cfg.optimizer.eps)
        self.iteration = 0
        self.history = []

    # -- one optimization step ------------------------------------------------

    def step(self):
        cfg = self.cfg
        adversarial = cfg.losses.lambda_adv > 0
        totals, sem_bces, bnd_bces, gen_losses, disc_losses = [], [], [], [], []

        for _ in range(cfg.batch_size):
            img, lab = sample_patch(self.volume, self.labels, cfg.model.patch_shape, self.sampler_rng)
            img, lab = augment(img, lab, self.sampler_rng, cfg.augment)
            img = img.astype(self.dtype)
            sem_target = (lab > 0).astype(self.dtype)
            bnd_target = boundary_target(lab).astype(self.dtype)

            out = self.model(Tensor(img))
            gen_loss = None
            if adversarial:
                probs = sigmoid(out.semantic_logits)
                gen_loss, disc_loss = fg_bg_adversarial_loss(img, probs, sem_target, self.disc, cfg.losses.lambda_match)
                gen_losses.append(gen_loss)
                disc_losses.append(disc_loss)
            total, sem_bce, bnd_bce = total_loss(out, sem_target, bnd_target, gen_loss, cfg.losses)
            totals.append(total)
            sem_bces.append(sem_bce)
            bnd_bces.append(bnd_bce)

        n = float(cfg.batch_size)
        batch_total = _mean(totals, n)
        record = {
            "iter": self.iteration + 1,
            "bce": float(_mean_value(sem_bces)),
            "bce_boundary": float(_mean_value(bnd_bces)),
            "gen_loss": float(_mean_value(gen_losses)) if gen_losses else 0.0,
            "disc_loss": float(_mean_value(disc_losses)) if disc_losses else 0.0,
            "total": float(batch_total.item()),
        }

        if adversarial:
            batch_disc = _mean(disc_losses, n)
            batch_disc.backward()
        batch_total.backward()
        if adversarial:
            self.opt_d.step()
            self.opt_d.zero_grad()
        self.opt_g.step()
        self.opt_g.zero_grad()
        self.iteration += 1
        return record

    # -- full run ---------------------------------------------------------------

    def train(self, log_path=None):
        cfg = self.cfg
        log_file = None
        if log_path is not None:
            log_file = open(log_path, "a")
        try:
            while self.iteration < cfg.iterations:
                record = self.step()
                self.history.append(record)
                if log_file is not None and (record["iter"] % cfg.log_every == 0 or record["iter"] == cfg.iterations):
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if self.out_dir is not None and cfg.checkpoint_every and record["iter"] % cfg.checkpoint_every == 0 and record["iter"] < cfg.iterations:
                    self.save(self.out_dir / f"checkpoint_{record['iter']:06d}.zip")
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoint.zip")
        finally:
            if log_file is not None:
                log_file.close()
        return self.history

    # -- checkpointing ------------------------------------------------------------

    def save(self, path):
        arrays = [(f"model.{n}", t.data) for n, t in self.model.parameters()]
        arrays += [(f"disc.{n}", t.data) for n, t in self.disc.parameters()]
        arrays += self.opt_g.state_tensors("opt_g")
        arrays += self.opt_d.state_tensors("opt_d")
        extra = {
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "sampler_state": self.sampler_rng.bit_generator.state,
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
        }
        return save_checkpoint(path, arrays, extra)

    def resume(self, path):
        arrays, extra = load_checkpoint(path)
        load_into(self.model, arrays, prefix="model.")
        load_into(self.disc, arrays, prefix="disc.")
        self.opt_g.load_state("opt_g", arrays, extra["opt_g_t"])
        self.opt_d.load_state("opt_d", arrays, extra["opt_d_t"])
        self.sampler_rng.bit_generator.state = extra["sampler_state"]
        self.iteration = int(extra["iteration"])
        return self


def _mean(tensors, n):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = acc + t
    return acc * (1.0 / n)


def _mean_value(tensors):
    if not tensors:
        return 0.0
    return sum(float(t.item()) for t in tensors) / len(tensors)
