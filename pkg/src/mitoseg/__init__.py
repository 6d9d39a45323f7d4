"""Desk-scale 3D mitochondria instance segmentation.

A from-scratch pipeline: numpy-backed tensors with reverse-mode autodiff,
an encoder-decoder over residual anisotropic conv blocks with split
space/slice attention fused by deformable convolution, BCE plus an
adversarial foreground/background mask loss, and connected-component
instance extraction with 3D instance metrics.
"""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "no_grad", "__version__"]
