"""Neural building blocks: 3D convolution layers, the residual anisotropic
conv block, linear projections, layer norm, and up/down-sampling.

All blocks are plain objects holding parameter Tensors; ``parameters()``
walks attributes in insertion order, which keeps checkpoint naming stable.
Forward passes are stateless, so inference on frozen weights is safe from
multiple threads.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, conv3d, relu, trilinear_sample, upsample3d

__all__ = [
    "Module",
    "Conv3d",
    "Linear",
    "LayerNorm",
    "AcbBlock",
    "Downsample",
    "Upsample",
    "layer_norm",
    "trilinear_sample",
    "he_normal",
    "param",
]


def param(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def he_normal(rng, shape, fan_in, gain=1.0, dtype=np.float64):
    std = gain * np.sqrt(2.0 / max(fan_in, 1))
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Module:
    """Minimal parameter container; submodules nest via attributes or lists."""

    def parameters(self):
        """All (name, tensor) pairs in deterministic construction order."""
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", t) for n, t in val.parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{n}", t) for n, t in item.parameters())
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
        return out

    def param_tensors(self):
        return [t for _, t in self.parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.param_tensors())

    def zero_grad(self):
        for t in self.param_tensors():
            t.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    """3D cross-correlation layer, weight[out_c, in_c, kT, kH, kW]."""

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1), padding=(0, 0, 0), bias=True, rng=None, dtype=np.float64, gain=1.0, zero_init=False):
        kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        fan_in = in_ch * int(np.prod(kernel))
        if zero_init:
            w = np.zeros((out_ch, in_ch) + kernel, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Conv3d needs an rng unless zero_init=True")
            w = he_normal(rng, (out_ch, in_ch) + kernel, fan_in, gain=gain, dtype=dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    """Pointwise projection x[..., in] -> x[..., out]."""

    def __init__(self, in_dim, out_dim, bias=True, rng=None, dtype=np.float64, gain=1.0, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            std = gain / np.sqrt(max(in_dim, 1))
            w = rng.normal(0.0, std, size=(in_dim, out_dim)).astype(dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


def layer_norm(x, gamma=None, beta=None, axis=-1, eps=1e-5):
    """Zero-mean/unit-variance over one axis, then optional scale and shift."""
    if x.shape[axis] < 2:
        raise ShapeError(f"layer_norm needs >= 2 elements along axis {axis}, got shape {x.shape}")
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    y = xc / (var + eps).sqrt()
    if gamma is not None:
        shape = [1] * len(x.shape)
        shape[axis] = x.shape[axis]
        y = y * gamma.reshape(shape) + beta.reshape(shape)
    return y


class LayerNorm(Module):
    def __init__(self, dim, axis=-1, eps=1e-5, dtype=np.float64):
        self.axis = axis
        self.eps = eps
        self.gamma = param(np.ones(dim, dtype=dtype))
        self.beta = param(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, axis=self.axis, eps=self.eps)


class AcbBlock(Module):
    """Residual anisotropic conv block.

    Three convolutions with kernels (1,3,3), (3,3,3), (3,3,3) and paddings
    that preserve T,H,W; a skip connects the first layer's output to the
    third layer's output (1x1x1 projection only if their widths differ):

        out = relu(conv3(relu(conv2(relu(conv1(x))))) + skip(conv1(x)))
    """

    def __init__(self, in_ch, out_ch, mid_ch=None, rng=None, dtype=np.float64, gain=1.0):
        mid_ch = out_ch if mid_ch is None else mid_ch
        self.conv1 = Conv3d(in_ch, mid_ch, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype, gain=gain)
        self.conv2 = Conv3d(mid_ch, out_ch, (3, 3, 3), padding=(1, 1, 1), rng=rng, dtype=dtype, gain=gain)
        self.conv3 = Conv3d(out_ch, out_ch, (3, 3, 3), padding=(1, 1, 1), rng=rng, dtype=dtype, gain=gain)
        self.skip = None if mid_ch == out_ch else Conv3d(mid_ch, out_ch, (1, 1, 1), rng=rng, dtype=dtype, gain=gain)

    def forward(self, x):
        h1 = self.conv1(x)
        h = self.conv3(relu(self.conv2(relu(h1))))
        s = h1 if self.skip is None else self.skip(h1)
        return relu(h + s)


class Downsample(Module):
    """Strided 3x3x3 convolution between resolution levels."""

    def __init__(self, in_ch, out_ch, stride, rng=None, dtype=np.float64, gain=1.0):
        self.conv = Conv3d(in_ch, out_ch, (3, 3, 3), stride=stride, padding=(1, 1, 1), rng=rng, dtype=dtype, gain=gain)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    """Trilinear upsampling followed by a 1x1x1 channel projection."""

    def __init__(self, in_ch, out_ch, factors, rng=None, dtype=np.float64, gain=1.0):
        self.factors = tuple(factors)
        self.proj = Conv3d(in_ch, out_ch, (1, 1, 1), rng=rng, dtype=dtype, gain=gain)

    def forward(self, x):
        return self.proj(upsample3d(x, self.factors))
