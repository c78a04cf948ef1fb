"""Softmax-free attention with Nystrom low-rank reconstruction.

Per head, with landmarks ``Qt = sample(Q)``::

    A = exp(Qt (-) Qt)          m x m
    P = exp(Qt (-) Q)           m x n
    out = P^T (NR(A) (P V))     n x d_h

The product is always evaluated right to left so no ``n x n`` matrix is
formed.  The dense ``S_hat = P^T NR(A) P`` is only built on request.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import matcore as mc
from .errors import DomainError, ShapeError
from .kernel import TokenSequence, gaussian_attention_matrix, softmax_attention_matrix
from .pinv import NewtonConfig, PinvReport, newton_pinv, safe_alpha
from .sampling import SamplerSpec, sample, sample_indices

MAX_DENSE_N = 4096


@dataclass
class AttentionConfig:
    d_e: int = 64
    heads: int = 2
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    newton: NewtonConfig = field(default_factory=NewtonConfig)

    def __post_init__(self):
        if self.heads < 1 or self.d_e % self.heads:
            raise ValueError(f"d_e={self.d_e} is not divisible into {self.heads} heads")

    @property
    def d_h(self):
        return self.d_e // self.heads

    def head_slices(self):
        return [slice(h * self.d_h, (h + 1) * self.d_h) for h in range(self.heads)]


@dataclass
class AttentionOutput:
    values_out: np.ndarray
    pinv_reports: list[PinvReport]
    s_hat: list[np.ndarray] | None = None


def _check_inputs(q, v, cfg):
    if q.features.shape != v.features.shape:
        raise ShapeError(f"q {q.features.shape} and v {v.features.shape} differ")
    if q.d != cfg.d_e:
        raise ShapeError(f"tokens have {q.d} features, config expects d_e={cfg.d_e}")


def head_columns(x, cols):
    """Contiguous copy of one head's column block."""
    return mc.copy(x[:, cols])


def soft_attention(q: TokenSequence, v: TokenSequence, cfg: AttentionConfig, return_s_hat=False):
    """Linear-cost SOFT attention over all heads.

    Landmarks are sampled once on the full ``d_e`` features, then split per
    head.  Set ``return_s_hat`` to also materialise each head's ``n x n``
    reconstructed attention matrix (debug only).
    """
    _check_inputs(q, v, cfg)
    q_tilde = sample(q, cfg.sampler).features
    out = mc.new((q.n, cfg.d_e))
    reports = []
    s_hats = [] if return_s_hat else None
    for cols in cfg.head_slices():
        qh = head_columns(q.features, cols)
        qth = head_columns(q_tilde, cols)
        vh = head_columns(v.features, cols)
        a = gaussian_attention_matrix(qth, qth, cfg.d_h)
        p = gaussian_attention_matrix(qth, qh, cfg.d_h)
        del qh, qth
        a_t, report = newton_pinv(a, cfg.newton)
        reports.append(report)
        z = mc.matmul(a_t, mc.matmul(p, vh))
        out[:, cols] = mc.matmul(mc.transpose(p), z)
        if return_s_hat:
            s_hats.append(mc.matmul(mc.transpose(p), mc.matmul(a_t, p)))
    return AttentionOutput(out, reports, s_hats)


# --------------------------------------------------------------------------
# differentiable path
# --------------------------------------------------------------------------


def newton_pinv_var(a, cfg: NewtonConfig):
    """Unrolled Newton iteration on the tape.

    The scale ``alpha = 2 beta^e / ||A||_1^2`` is differentiated through
    ``||A||_1``; the exponent ``e`` is piecewise constant and held fixed.
    """
    alpha, _, _ = safe_alpha(a.value, cfg)
    a_k = ag.mul(a, ag.one_norm_scale(a, alpha))
    for _ in range(cfg.max_iters):
        a_k = ag.sub(ag.scalar_mul(a_k, 2.0), ag.matmul(ag.matmul(a_k, a), a_k))
    return a_k


def sample_var(q, grid_h, grid_w, spec: SamplerSpec, conv_weights=None):
    """Differentiable landmark selection on ``(..., n, d)`` tokens."""
    m = spec.bottleneck_size(grid_h, grid_w)
    if spec.method == "avg_pool":
        return ag.avg_pool(q, grid_h, grid_w, spec.kernel)
    if spec.method == "conv":
        if conv_weights is None:
            raise ShapeError("conv sampling needs conv_weights")
        return ag.matmul(ag.window_flatten(q, grid_h, grid_w, spec.kernel), conv_weights)
    return ag.gather_rows(q, sample_indices(spec.method, grid_h * grid_w, m, spec.seed))


def soft_attention_var(q, v, grid_h, grid_w, cfg: AttentionConfig, conv_weights=None):
    """Tape-recorded :func:`soft_attention`; accepts a leading batch axis."""
    q, v = ag.as_var(q), ag.as_var(v)
    if q.shape != v.shape or q.shape[-1] != cfg.d_e:
        raise ShapeError(f"q {q.shape} / v {v.shape} do not match d_e={cfg.d_e}")
    q_tilde = sample_var(q, grid_h, grid_w, cfg.sampler, conv_weights)
    heads = []
    for cols in cfg.head_slices():
        qh = ag.slice_cols(q, cols.start, cols.stop)
        qth = ag.slice_cols(q_tilde, cols.start, cols.stop)
        vh = ag.slice_cols(v, cols.start, cols.stop)
        a = ag.gaussian_attention(qth, qth, cfg.d_h)
        p = ag.gaussian_attention(qth, qh, cfg.d_h)
        a_t = newton_pinv_var(a, cfg.newton)
        z = ag.matmul(a_t, ag.matmul(p, vh))
        heads.append(ag.matmul(ag.transpose(p), z))
    return heads[0] if len(heads) == 1 else ag.concat_cols(heads)


def exact_gaussian_attention(q, v, d_e=None):
    """Dense ``S V`` with the exact Gaussian-kernel ``S`` (quadratic oracle)."""
    q = np.asarray(q, dtype=mc.DTYPE)
    s = gaussian_attention_matrix(q, q, d_e)
    return mc.matmul(s, v)


def exact_attention(q: TokenSequence, v: TokenSequence, cfg: AttentionConfig, mechanism="exact_gaussian"):
    """Multi-head dense attention, one ``n x n`` matrix alive at a time."""
    _check_inputs(q, v, cfg)
    out = mc.new((q.n, cfg.d_e))
    for cols in cfg.head_slices():
        qh = head_columns(q.features, cols)
        vh = head_columns(v.features, cols)
        if mechanism == "exact_gaussian":
            s = gaussian_attention_matrix(qh, qh, cfg.d_h)
        elif mechanism == "softmax_exact":
            s = softmax_attention_matrix(qh, qh, cfg.d_h)
        else:
            raise ValueError(f"unknown dense mechanism {mechanism!r}")
        out[:, cols] = mc.matmul(s, vh)
        del s
    return out


def nystrom_parts(q: TokenSequence, cfg: AttentionConfig):
    """Per-head dense pieces ``(S_hat, S, A, P)`` for inspection and dumps."""
    if q.n > MAX_DENSE_N:
        raise DomainError(f"n={q.n} is too large to materialise (limit {MAX_DENSE_N})")
    if q.d != cfg.d_e:
        raise ShapeError(f"tokens have {q.d} features, config expects d_e={cfg.d_e}")
    q_tilde = sample(q, cfg.sampler).features
    parts = []
    for cols in cfg.head_slices():
        qh = head_columns(q.features, cols)
        qth = head_columns(q_tilde, cols)
        a = gaussian_attention_matrix(qth, qth, cfg.d_h)
        p = gaussian_attention_matrix(qth, qh, cfg.d_h)
        a_t, _ = newton_pinv(a, cfg.newton)
        s_hat = mc.matmul(mc.transpose(p), mc.matmul(a_t, p))
        s = gaussian_attention_matrix(qh, qh, cfg.d_h)
        parts.append((s_hat, s, a, p))
    return parts


def approximation_error(q, cfg: AttentionConfig):
    """``||S_hat - S||_F / ||S||_F`` pooled over heads."""
    if not isinstance(q, TokenSequence):
        q = TokenSequence.square(q)
    num = den = 0.0
    for s_hat, s, _, _ in nystrom_parts(q, cfg):
        num += float(np.sum((s_hat - s) ** 2))
        den += float(np.sum(s**2))
    return float(np.sqrt(num / den))


def write_matrix_csv(path, a):
    """Row-major CSV at full precision (``%.17g``)."""
    np.savetxt(path, np.atleast_2d(a), delimiter=",", fmt="%.17g", newline="\n")
