"""Training objectives: stable BCE from logits, the foreground/background
adversarial loss with its small conv discriminator, and the total objective

    L = BCE(semantic) + BCE(boundary) + lambda_adv * L_fgbg

The discriminator reads the intensity volume concatenated with a mask
(ground truth or predicted, all instances merged to foreground) and outputs
one probability. Generator and discriminator losses keep their gradients on
disjoint parameter sets: the discriminator loss sees a detached mask, the
generator loss runs the discriminator with frozen weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv3d, Module
from .tensor import ShapeError, Tensor, concat, frozen, relu, sigmoid, softplus


@dataclass
class LossWeights:
    lambda_adv: float = 0.5  # weight of the adversarial term in the total loss
    lambda_match: float = 0.1  # weight of the discriminator-output matching term

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_match < 0:
            raise ValueError(f"loss weights must be >= 0, got lambda_adv={self.lambda_adv}, lambda_match={self.lambda_match}")


def bce_loss(logits, target):
    """Mean binary cross-entropy from logits, log-sum-exp stable form."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if tuple(logits.shape) != tuple(target_arr.shape):
        raise ShapeError(f"bce_loss shape mismatch: logits {logits.shape} vs target {target_arr.shape}")
    t = Tensor(target_arr.astype(logits.dtype))
    return (softplus(logits) - logits * t).mean()


class Discriminator(Module):
    """Two stride-2 3D convolutions (in -> 16 -> 1) with a global-average
    head producing a scalar probability.

    The final conv is zero-initialized, so an untrained discriminator
    outputs exactly 0.5.
    """

    def __init__(self, in_channels=2, hidden=16, rng=None, dtype=np.float64):
        self.conv1 = Conv3d(in_channels, hidden, (3, 3, 3), stride=(2, 2, 2), padding=(1, 1, 1), rng=rng, dtype=dtype)
        self.conv2 = Conv3d(hidden, 1, (3, 3, 3), stride=(2, 2, 2), padding=(1, 1, 1), zero_init=True, dtype=dtype)

    def score(self, f):
        """Pre-sigmoid scalar score for input (1, C, T, H, W)."""
        return self.conv2(relu(self.conv1(f))).mean()

    def forward(self, f):
        return sigmoid(self.score(f))


def _disc_input(volume, mask):
    """CONCAT(I, M) as a (1, 2, T, H, W) tensor."""
    T, H, W = volume.shape
    v = volume if isinstance(volume, Tensor) else Tensor(volume)
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    return concat([v.reshape(1, 1, T, H, W), m.reshape(1, 1, T, H, W)], axis=1)


def fg_bg_adversarial_loss(volume, mask_pred, mask_gt, disc, lambda_match=0.1):
    """Adversarial foreground/background loss -> (gen_loss, disc_loss).

    disc_loss = -[log D(I,M_gt) + log(1 - D(I,M_pred))] with M_pred detached;
    gen_loss  = -log D(I,M_pred) + lambda_match * |D(I,M_gt) - D(I,M_pred)|
    with the discriminator frozen (non-saturating generator form).
    """
    pd = mask_pred.data if isinstance(mask_pred, Tensor) else np.asarray(mask_pred)
    if pd.min() < 0.0 or pd.max() > 1.0:
        raise ValueError(f"predicted mask must lie in [0,1], got range [{pd.min():.4g}, {pd.max():.4g}]")
    gt = mask_gt.data if isinstance(mask_gt, Tensor) else np.asarray(mask_gt)
    if gt.min() < 0.0 or gt.max() > 1.0:
        raise ValueError(f"ground-truth mask must lie in [0,1], got range [{gt.min():.4g}, {gt.max():.4g}]")

    mask_pred = mask_pred if isinstance(mask_pred, Tensor) else Tensor(mask_pred)
    f_gt = _disc_input(volume, Tensor(gt))

    # discriminator side: gradients must not reach the generator
    s_gt = disc.score(f_gt)
    s_pr_det = disc.score(_disc_input(volume, mask_pred.detach()))
    disc_loss = softplus(-s_gt) + softplus(s_pr_det)

    # generator side: gradients must not reach the discriminator
    with frozen(disc.param_tensors()):
        f_pr = _disc_input(volume, mask_pred)
        s_pr = disc.score(f_pr)
        p_gt = sigmoid(disc.score(f_gt))
        gen_loss = softplus(-s_pr) + lambda_match * (p_gt - sigmoid(s_pr)).abs()

    return gen_loss, disc_loss


def total_loss(output, sem_target, bnd_target, gen_loss=None, weights=LossWeights()):
    """Combined objective; returns (total, sem_bce, bnd_bce)."""
    sem_bce = bce_loss(output.semantic_logits, sem_target)
    bnd_bce = bce_loss(output.boundary_logits, bnd_target)
    total = sem_bce + bnd_bce
    if gen_loss is not None and weights.lambda_adv > 0:
        total = total + weights.lambda_adv * gen_loss
    return total, sem_bce, bnd_bce


def boundary_target(labels):
    """1-voxel in-plane boundary of an instance label volume.

    A voxel is boundary if any of its 8 in-plane neighbours carries a
    different label (background included); volume edges count as background.
    """
    lab = np.asarray(labels)
    fg = lab > 0
    out = np.zeros(lab.shape, dtype=bool)
    for dh in (-1, 0, 1):
        for dw in (-1, 0, 1):
            if dh == 0 and dw == 0:
                continue
            shifted = np.full_like(lab, -1)
            hs = slice(max(0, dh), lab.shape[1] + min(0, dh))
            ws = slice(max(0, dw), lab.shape[2] + min(0, dw))
            hs_src = slice(max(0, -dh), lab.shape[1] + min(0, -dh))
            ws_src = slice(max(0, -dw), lab.shape[2] + min(0, -dw))
            shifted[:, hs, ws] = lab[:, hs_src, ws_src]
            out |= fg & (shifted != lab)
    return out
