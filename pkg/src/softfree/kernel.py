"""Attention similarity matrices: Gaussian kernel and softmax baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import matcore as mc
from .errors import DomainError, ShapeError


@dataclass
class TokenSequence:
    """``n x d`` token features laid out on an ``grid_h x grid_w`` grid."""

    features: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.features = mc.as_matrix(self.features)
        if self.features.ndim != 2:
            raise ShapeError(f"token features must be 2-D, got {self.features.shape}")
        n, d = self.features.shape
        if self.grid_h * self.grid_w != n:
            raise ShapeError(f"grid {self.grid_h}x{self.grid_w} does not hold {n} tokens")
        if d <= 0:
            raise ShapeError("tokens need at least one feature")

    @classmethod
    def square(cls, features):
        n = np.shape(features)[0]
        side = math.isqrt(n)
        if side * side != n:
            raise ShapeError(f"{n} tokens do not form a square grid")
        return cls(features, side, side)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


@dataclass
class ProjectionWeights:
    """Tied query/key projection plus value projection."""

    w_qk: np.ndarray
    w_v: np.ndarray


def project(x: TokenSequence, w: ProjectionWeights):
    """Project tokens to queries (which double as keys) and values."""
    if x.d != w.w_qk.shape[0] or x.d != w.w_v.shape[0]:
        raise ShapeError(f"tokens have {x.d} features, projections expect {w.w_qk.shape[0]}")
    q = mc.matmul(x.features, w.w_qk)
    v = mc.matmul(x.features, w.w_v)
    return TokenSequence(q, x.grid_h, x.grid_w), TokenSequence(v, x.grid_h, x.grid_w)


def pairwise_sq_dist(a, b):
    """Squared Euclidean distances between the rows of ``a`` and ``b``.

    Uses ``|a|^2 + |b|^2 - 2 a.b`` with one matmul and clamps round-off
    negatives to zero.  When ``a is b`` the result is built as ``T + T.T``
    with ``T_ij = |a_i|^2 - a_i.a_j`` so it is exactly symmetric with an exact
    zero diagonal.  Leading batch axes are allowed.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"feature dims differ: {a.shape} vs {b.shape}")
    if a is b:
        gram = mc.matmul(a, mc.transpose(a))
        sq = mc.copy(np.diagonal(gram, axis1=-2, axis2=-1))[..., :, None]
        np.subtract(sq, gram, out=gram)
        out = mc.new(gram.shape)
        np.add(gram, mc.transpose(gram), out=out)
        del gram
    else:
        out = mc.matmul(a, mc.transpose(b))
        out *= -2.0
        out += mc.row_sq_norms(a)[..., :, None]
        out += mc.row_sq_norms(b)[..., None, :]
    np.maximum(out, 0.0, out=out)
    return out


def gaussian_scale(d_e):
    """Multiplier applied to squared distances inside the exponential."""
    if d_e <= 0:
        raise DomainError("d_e must be positive")
    return -1.0 / (2.0 * math.sqrt(d_e))


def gaussian_attention_matrix(q, k, d_e=None):
    """``S_ij = exp(-|q_i - k_j|^2 / (2 sqrt(d_e)))``.

    Pass the same array as ``q`` and ``k`` to get the exactly symmetric
    self-attention matrix.
    """
    if d_e is None:
        d_e = q.shape[-1]
    scale = gaussian_scale(d_e)
    if q.shape[-1] != d_e or k.shape[-1] != d_e:
        raise ShapeError(f"expected {d_e} features, got {q.shape[-1]} and {k.shape[-1]}")
    out = pairwise_sq_dist(q, k)
    out *= scale
    np.exp(out, out=out)
    return out


def softmax_attention_matrix(q, k, d_e=None):
    """Row-wise softmax of ``q k^T / sqrt(d_e)``."""
    if d_e is None:
        d_e = q.shape[-1]
    if d_e <= 0:
        raise DomainError("d_e must be positive")
    if q.shape[-1] != d_e or k.shape[-1] != d_e:
        raise ShapeError(f"expected {d_e} features, got {q.shape[-1]} and {k.shape[-1]}")
    out = mc.matmul(q, mc.transpose(k))
    out *= 1.0 / math.sqrt(d_e)
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out
