"""Softmax-free attention: Gaussian-kernel self-attention with a Nystrom
low-rank reconstruction and a Newton-iteration pseudoinverse.

Modules:

- ``matcore``: float64 matrix helpers, norms, Jacobi eigensolver, allocation accounting
- ``kernel``: token sequences, Gaussian-kernel and softmax attention matrices
- ``pinv``: Newton pseudoinverse and the eigendecomposition oracle
- ``sampling``: landmark (bottleneck) samplers
- ``attention``: linear-cost attention, dense oracles, error metrics
- ``autograd``: tape-based reverse-mode differentiation
- ``model``: toy classifier, synthetic task, training loop
- ``bench`` / ``cli``: benchmark drivers and the ``softfree`` command
"""

from .attention import (
    AttentionConfig,
    AttentionOutput,
    approximation_error,
    exact_attention,
    exact_gaussian_attention,
    soft_attention,
    soft_attention_var,
)
from .errors import DomainError, NumericError, ShapeError, UsageError
from .kernel import TokenSequence, gaussian_attention_matrix, pairwise_sq_dist, softmax_attention_matrix
from .pinv import NewtonConfig, PinvReport, alpha_init, eigh_pinv, newton_pinv
from .sampling import SamplerSpec, sample

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "DomainError",
    "NewtonConfig",
    "NumericError",
    "PinvReport",
    "SamplerSpec",
    "ShapeError",
    "TokenSequence",
    "UsageError",
    "alpha_init",
    "approximation_error",
    "eigh_pinv",
    "exact_attention",
    "exact_gaussian_attention",
    "gaussian_attention_matrix",
    "newton_pinv",
    "pairwise_sq_dist",
    "sample",
    "soft_attention",
    "soft_attention_var",
    "softmax_attention_matrix",
]
