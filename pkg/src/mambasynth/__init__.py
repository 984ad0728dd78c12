"""Adversarial image-to-image synthesis with a selective state-space bottleneck.

A self-contained engine: numpy-backed tape autodiff, conv/norm layers, the
four-direction selective scan, a translation generator with a mixer-injected
bottleneck, a patch discriminator, the adversarial training loop, and
PSNR/SSIM/Wilcoxon evaluation.
"""

__version__ = "0.1.0"

from .tensor import (  # noqa: F401
    ConfigError,
    ContractError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    TensorError,
    backward,
    finite_diff_check,
)
