"""Encoder-decoder segmentation model for EM volume patches.

Four encoder levels and three decoder levels of residual anisotropic conv
blocks, each optionally followed by a split space/slice attention block.
Skip connections feed each encoder level's output to the mirrored decoder
level. Two 1x1x1 heads off the final decoder features emit semantic-mask
and instance-boundary logits at input resolution. An optional per-frame
kernel-predicting denoiser runs before the encoder (identity bypass by
default); it is trained jointly with the rest of the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .attention import AttentionConfig, AttentionWeights, attention_forward
from .nn import AcbBlock, Conv3d, Downsample, Linear, Module, Upsample
from .tensor import ShapeError, Tensor, concat, relu, softmax

DOWN_STRIDES = ((1, 2, 2), (1, 2, 2), (2, 2, 2))
DENOISERS = ("identity", "kernel-predict")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 96)
    patch_shape: tuple = (8, 64, 64)
    denoiser: str = "identity"
    fusion: str = "def-conv"
    topology: str = "split"
    deform_kernel: tuple = (1, 3, 3)
    attn_encoder: tuple = (False, False, True, True)
    attn_decoder: tuple = (True, False, False)
    conv_gain: float = 1.0
    dtype: str = "f64"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        self.deform_kernel = tuple(int(k) for k in self.deform_kernel)
        self.attn_encoder = tuple(bool(b) for b in self.attn_encoder)
        self.attn_decoder = tuple(bool(b) for b in self.attn_decoder)
        if len(self.channels) != 4:
            raise ValueError(f"model has 4 encoder levels, need 4 channel widths, got {self.channels}")
        if len(self.attn_encoder) != 4 or len(self.attn_decoder) != 3:
            raise ValueError("attn_encoder needs 4 flags and attn_decoder 3 (one per level)")
        if self.denoiser not in DENOISERS:
            raise ValueError(f"denoiser must be one of {DENOISERS}, got {self.denoiser!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")
        # validate the attention enums eagerly, not at first model build
        AttentionConfig(d_model=max(self.channels[0], 1), fusion=self.fusion, topology=self.topology, deform_kernel=self.deform_kernel)
        t, h, w = self.patch_shape
        ft = int(np.prod([s[0] for s in DOWN_STRIDES]))
        fs = int(np.prod([s[1] for s in DOWN_STRIDES]))
        if t % ft or h % fs or w % fs:
            raise ValueError(f"patch shape {self.patch_shape} must be divisible by the downsampling factors ({ft},{fs},{fs})")
        if self.denoiser == "kernel-predict" and t < 3:
            raise ValueError("kernel-predict denoiser needs patches with T >= 3")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def attention_config(self, width):
        return AttentionConfig(d_model=width, fusion=self.fusion, topology=self.topology, deform_kernel=self.deform_kernel)


class ModelOutput(NamedTuple):
    semantic_logits: Tensor
    boundary_logits: Tensor


def _replicate_pad_hw(x):
    """Edge-replicate by one voxel along H and W (last two axes)."""
    x = concat([x[..., :1, :], x, x[..., -1:, :]], axis=x.ndim - 2)
    return concat([x[..., :1], x, x[..., -1:]], axis=x.ndim - 1)


class KernelDenoiser(Module):
    """Per-frame denoising by predicted kernels.

    For each frame t, a small conv net reads the (prev, cur, next) triplet
    (borders replicated) and predicts three 3x3 kernels, softmax-normalized
    so the taps sum to 1 overall; the output frame is the sum of the three
    per-frame 2D convolutions, computed with edge replication so constants
    pass through unchanged.
    """

    def __init__(self, rng, dtype=np.float64, hidden=8):
        self.feat1 = Conv3d(3, hidden, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), rng=rng, dtype=dtype)
        self.feat2 = Conv3d(hidden, hidden, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), rng=rng, dtype=dtype)
        self.head = Linear(hidden, 27, rng=rng, dtype=dtype)

    def predict_kernels(self, triplet):
        """triplet (1,3,1,H,W) -> kernel stack (1,3,1,3,3) summing to 1."""
        h = relu(self.feat1(triplet))
        h = relu(self.feat2(h))
        pooled = h.mean(axis=(2, 3, 4))  # (1, hidden)
        logits = self.head(pooled)
        return softmax(logits, axis=-1).reshape(1, 3, 1, 3, 3)

    @staticmethod
    def apply_kernels(triplet, kernels):
        """Convolve the frame triplet with the kernel stack -> (1,1,1,H,W)."""
        from .tensor import conv3d

        return conv3d(_replicate_pad_hw(triplet), kernels)

    def forward(self, x):
        """x: Tensor (T,H,W) -> denoised Tensor (T,H,W)."""
        T, H, W = x.shape
        frames = []
        for t in range(T):
            idx = [max(t - 1, 0), t, min(t + 1, T - 1)]
            triplet = concat([x[i].reshape(1, 1, 1, H, W) for i in idx], axis=1)
            k = self.predict_kernels(triplet)
            frames.append(self.apply_kernels(triplet, k))
        return concat(frames, axis=2).reshape(T, H, W)


class SegModel(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype
        c = cfg.channels
        g = cfg.conv_gain
        self.cfg = cfg
        self.denoiser = KernelDenoiser(rng, dtype=dtype) if cfg.denoiser == "kernel-predict" else None

        self.enc = [
            AcbBlock(1, c[0], rng=rng, dtype=dtype, gain=g),
            AcbBlock(c[1], c[1], rng=rng, dtype=dtype, gain=g),
            AcbBlock(c[2], c[2], rng=rng, dtype=dtype, gain=g),
            AcbBlock(c[3], c[3], rng=rng, dtype=dtype, gain=g),
        ]
        self.down = [Downsample(c[i], c[i + 1], DOWN_STRIDES[i], rng=rng, dtype=dtype, gain=g) for i in range(3)]
        self.enc_attn = [AttentionWeights(cfg.attention_config(c[i]), rng, dtype=dtype) if cfg.attn_encoder[i] else None for i in range(4)]

        # decoder levels mirror encoder levels 3, 2, 1
        self.up = [
            Upsample(c[3], c[2], DOWN_STRIDES[2], rng=rng, dtype=dtype, gain=g),
            Upsample(c[2], c[1], DOWN_STRIDES[1], rng=rng, dtype=dtype, gain=g),
            Upsample(c[1], c[0], DOWN_STRIDES[0], rng=rng, dtype=dtype, gain=g),
        ]
        self.dec = [
            AcbBlock(2 * c[2], c[2], rng=rng, dtype=dtype, gain=g),
            AcbBlock(2 * c[1], c[1], rng=rng, dtype=dtype, gain=g),
            AcbBlock(2 * c[0], c[0], rng=rng, dtype=dtype, gain=g),
        ]
        self.dec_attn = [AttentionWeights(cfg.attention_config(c[2 - i]), rng, dtype=dtype) if cfg.attn_decoder[i] else None for i in range(3)]

        # zero-init heads: training starts from calibrated 0.5 probabilities
        self.sem_head = Conv3d(c[0], 1, (1, 1, 1), bias=False, zero_init=True, dtype=dtype)
        self.bnd_head = Conv3d(c[0], 1, (1, 1, 1), bias=False, zero_init=True, dtype=dtype)

    # encoder level i skips to decoder level 2-i (mirrored resolution)
    skip_pairs = ((0, 2), (1, 1), (2, 0))

    @staticmethod
    def _attend(x5, attn_w):
        if attn_w is None:
            return x5
        n, C, T, H, W = x5.shape
        x = x5.reshape(C, T, H, W).permute((1, 2, 3, 0))
        y = attention_forward(x, attn_w)
        return y.permute((3, 0, 1, 2)).reshape(1, C, T, H, W)

    def denoise(self, x):
        """Denoiser stage on a (T,H,W) tensor; identity mode passes through."""
        if self.denoiser is None:
            return x
        return self.denoiser(x)

    def forward(self, x) -> ModelOutput:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        if tuple(x.shape) != self.cfg.patch_shape:
            raise ShapeError(f"input shape {x.shape} does not match configured patch shape {self.cfg.patch_shape}")
        T, H, W = x.shape

        h = self.denoise(x).reshape(1, 1, T, H, W)
        skips = []
        for i in range(4):
            h = self._attend(self.enc[i](h), self.enc_attn[i])
            if i < 3:
                skips.append(h)
                h = self.down[i](h)

        for i in range(3):
            h = self.up[i](h)
            h = concat([h, skips[2 - i]], axis=1)
            h = self._attend(self.dec[i](h), self.dec_attn[i])

        sem = self.sem_head(h).reshape(T, H, W)
        bnd = self.bnd_head(h).reshape(T, H, W)
        return ModelOutput(sem, bnd)


def count_parameters(cfg: ModelConfig) -> int:
    """Total trainable scalar count for a config; independent of the seed."""
    return SegModel(cfg, seed=0).num_parameters()
