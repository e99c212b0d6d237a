"""Convolutions with a separable, learnable-free spatial density over each kernel.

A density ``phi = alpha alpha^T`` rescales every kernel elementwise before
the convolution runs, so ``W_phi = phi * W`` is what the layer actually
applies while the optimiser keeps updating the raw ``W``.
"""

from ._kernels import get_backend, set_backend
from .conv import ConvGeometry, KernelTensor, conv2d_backward, conv2d_forward, wconv2d_backward, wconv2d_forward
from .density import DensityFunction, build_density, uniform_density, validate_density

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry", "KernelTensor", "conv2d_forward", "conv2d_backward",
    "wconv2d_forward", "wconv2d_backward",
    "DensityFunction", "build_density", "uniform_density", "validate_density",
    "get_backend", "set_backend", "__version__",
]
