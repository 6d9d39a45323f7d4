"""Split space/slice self-attention with deformable fusion.

A feature volume (T, H, W, C) is attended along two token layouts computed
in parallel from the same pre-normalized input:

  * spatial: per slice t, tokens are the H*W in-plane positions;
  * temporal: per position (h, w), tokens are the T slices ("temporal" here
    means the z/slice axis of the stack, not wall-clock time).

The two attention maps are fused either by a deformable convolution whose
per-tap 3D offsets are predicted from the temporal map, by channel concat +
1x1x1 projection, or by addition. Cascaded orderings (spatial-then-temporal
and the reverse) are supported as config switches for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import Conv3d, LayerNorm, Linear, Module, param
from .tensor import ShapeError, Tensor, concat, softmax, trilinear_sample

FUSION_MODES = ("def-conv", "concat", "addition")
TOPOLOGIES = ("split", "spatial-then-temporal", "temporal-then-spatial")


@dataclass
class AttentionConfig:
    d_model: int
    d_k: int | None = None
    fusion: str = "def-conv"
    topology: str = "split"
    deform_kernel: tuple = (1, 3, 3)
    max_spatial_tokens: int = 4096

    def __post_init__(self):
        if self.d_k is None:
            self.d_k = self.d_model
        if self.d_k <= 0 and self.d_model > 0:
            raise ValueError(f"d_k must be positive, got {self.d_k}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        self.deform_kernel = tuple(int(k) for k in self.deform_kernel)
        if len(self.deform_kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.deform_kernel):
            raise ValueError(f"deform_kernel must be three odd extents, got {self.deform_kernel}")
        if self.topology != "split" and self.d_k != self.d_model:
            raise ValueError("cascaded topologies need d_k == d_model so attentions can chain")

    @property
    def num_taps(self):
        return int(np.prod(self.deform_kernel))


class AttentionMaps(NamedTuple):
    """Spatial and temporal attention outputs prior to fusion, (T,H,W,d_k) each."""

    spatial: Tensor
    temporal: Tensor


class AttentionWeights(Module):
    """Parameters for one attention block; which fusion weights exist follows
    the config so checkpoints carry no dead tensors."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        self.cfg = cfg
        C, dk = cfg.d_model, cfg.d_k
        self.norm = LayerNorm(C, axis=-1, dtype=dtype)
        self.w_qs = Linear(C, dk, bias=False, rng=rng, dtype=dtype)
        self.w_ks = Linear(C, dk, bias=False, rng=rng, dtype=dtype)
        self.w_vs = Linear(C, dk, bias=False, rng=rng, dtype=dtype)
        self.w_qt = Linear(C, dk, bias=False, rng=rng, dtype=dtype)
        self.w_kt = Linear(C, dk, bias=False, rng=rng, dtype=dtype)
        self.w_vt = Linear(C, dk, bias=False, rng=rng, dtype=dtype)
        if cfg.topology == "split" and cfg.fusion == "def-conv":
            # zero-init offsets: training starts at the plain-convolution degeneracy
            self.offset_conv = Conv3d(dk, 3 * cfg.num_taps, (1, 1, 1), zero_init=True, dtype=dtype)
            fan_in = dk * cfg.num_taps
            self.deform_weight = param(rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), size=(dk, dk) + cfg.deform_kernel).astype(dtype))
        if cfg.topology == "split" and cfg.fusion == "concat":
            self.concat_proj = Linear(2 * dk, dk, rng=rng, dtype=dtype)
        self.out_proj = Linear(dk, C, rng=rng, dtype=dtype)


def _check_input(x, w):
    if x.ndim != 4:
        raise ShapeError(f"attention expects (T,H,W,C) input, got shape {x.shape}")
    if x.shape[-1] != w.cfg.d_model:
        raise ShapeError(f"input has {x.shape[-1]} channels, config expects {w.cfg.d_model}")


def spatial_attention(x, w, return_weights=False):
    """Per-slice self-attention over the H*W in-plane tokens.

    x is expected pre-normalized by the caller; returns (T,H,W,d_k).
    """
    _check_input(x, w)
    T, H, W, C = x.shape
    if H * W > w.cfg.max_spatial_tokens:
        raise ShapeError(f"spatial attention over {H * W} tokens exceeds the limit of {w.cfg.max_spatial_tokens}; reduce the in-plane extent or gate this level off")
    tok = x.reshape(T, H * W, C)
    q, k, v = w.w_qs(tok), w.w_ks(tok), w.w_vs(tok)
    scale = 1.0 / np.sqrt(w.cfg.d_k)
    attn = softmax((q @ k.permute((0, 2, 1))) * scale, axis=-1)
    out = (attn @ v).reshape(T, H, W, w.cfg.d_k)
    return (out, attn) if return_weights else out


def temporal_attention(x, w, return_weights=False):
    """Per-position self-attention over the T slices.

    Projections are applied first, then permuted so the attention axis is T;
    the result is permuted back to (T,H,W,d_k).
    """
    _check_input(x, w)
    T, H, W, C = x.shape
    tok = x.reshape(T, H * W, C)
    qp = w.w_qt(tok).permute((1, 0, 2))  # (HW, T, d_k)
    kp = w.w_kt(tok).permute((1, 0, 2))
    vp = w.w_vt(tok).permute((1, 0, 2))
    scale = 1.0 / np.sqrt(w.cfg.d_k)
    attn = softmax((qp @ kp.permute((0, 2, 1))) * scale, axis=-1)  # (HW, T, T)
    out = (attn @ vp).permute((1, 0, 2)).reshape(T, H, W, w.cfg.d_k)
    return (out, attn) if return_weights else out


def _base_grid(shape, taps, kernel):
    """Integer sampling positions k_0 + k_n for a centered kernel, (|R|, THW, 3)."""
    T, H, W = shape
    grid = np.indices((T, H, W)).reshape(3, -1).T.astype(np.float64)
    centers = np.array([k // 2 for k in kernel], dtype=np.float64)
    return [grid + (np.array(tap, dtype=np.float64) - centers) for tap in taps]


def deformable_fuse(maps: AttentionMaps, w):
    """Fuse the two maps by deformable convolution over the spatial map.

    The offset predictor (1x1x1 conv, 3 offsets per kernel tap) reads the
    temporal map; each output position accumulates W(k_n) applied to the
    spatial map sampled trilinearly at k_0 + k_n + offset. The accumulation
    over input channels is a sum.
    """
    xs, xt = maps.spatial, maps.temporal
    if xs.shape != xt.shape:
        raise ShapeError(f"attention maps disagree in shape: {xs.shape} vs {xt.shape}")
    cfg = w.cfg
    T, H, W, dk = xs.shape
    n_taps = cfg.num_taps
    if w.offset_conv.weight.shape[0] != 3 * n_taps:
        raise ShapeError(f"offset predictor emits {w.offset_conv.weight.shape[0]} channels, kernel {cfg.deform_kernel} needs {3 * n_taps}")

    xt_cf = xt.permute((3, 0, 1, 2)).reshape(1, dk, T, H, W)
    offsets = w.offset_conv(xt_cf).reshape(n_taps, 3, T * H * W)
    if cfg.deform_kernel[0] == 1:
        # in-plane kernel: the slice-axis offset component stays inactive
        offsets = offsets * Tensor(np.array([0.0, 1.0, 1.0], dtype=xt.dtype).reshape(1, 3, 1))
    xs_cf = xs.permute((3, 0, 1, 2))  # (d_k, T, H, W)

    kT, kH, kW = cfg.deform_kernel
    taps = [(dt, dh, dw) for dt in range(kT) for dh in range(kH) for dw in range(kW)]
    grids = np.stack(_base_grid((T, H, W), taps, cfg.deform_kernel))  # (|R|, THW, 3)

    # all taps sampled in one call, then one GEMM over (channel, tap)
    s = T * H * W
    coords = offsets.permute((0, 2, 1)).reshape(n_taps * s, 3) + Tensor(grids.reshape(n_taps * s, 3).astype(xs.dtype))
    sampled = trilinear_sample(xs_cf, coords).reshape(dk * n_taps, s)  # (d_k*|R|, THW)
    out = w.deform_weight.reshape(dk, dk * n_taps) @ sampled  # (C_out, THW)
    return out.permute((1, 0)).reshape(T, H, W, dk)


def attention_forward(x, w):
    """Pre-norm attention block with residual: norm -> attend -> fuse -> project -> +x."""
    _check_input(x, w)
    cfg = w.cfg
    xn = w.norm(x)
    if cfg.topology == "split":
        maps = AttentionMaps(spatial_attention(xn, w), temporal_attention(xn, w))
        if cfg.fusion == "def-conv":
            fused = deformable_fuse(maps, w)
        elif cfg.fusion == "concat":
            fused = w.concat_proj(concat([maps.spatial, maps.temporal], axis=-1))
        else:
            fused = maps.spatial + maps.temporal
    elif cfg.topology == "spatial-then-temporal":
        fused = temporal_attention(spatial_attention(xn, w), w)
    else:
        fused = spatial_attention(temporal_attention(xn, w), w)
    return w.out_proj(fused) + x
