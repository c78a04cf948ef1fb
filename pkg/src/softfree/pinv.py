"""Moore-Penrose pseudoinverse of the landmark Gram matrix.

The production path is the Newton-Raphson (Newton-Schulz) recurrence
``A_{k+1} = 2 A_k - A_k A A_k`` started from ``A_0 = alpha A``.  An
eigendecomposition-based pseudoinverse serves as the reference oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import matcore as mc
from .errors import DomainError, NumericError, ShapeError

ALPHA_RULES = ("beta_search", "one_norm")
NORM_KINDS = ("frobenius", "spectral")


@dataclass
class NewtonConfig:
    max_iters: int = 20
    beta: float = 0.5
    alpha_search_cap: int = 100
    norm_kind: str = "frobenius"
    alpha_rule: str = "beta_search"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.alpha_search_cap < 0:
            raise ValueError("alpha_search_cap must be >= 0")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")
        if self.alpha_rule not in ALPHA_RULES:
            raise ValueError(f"alpha_rule must be one of {ALPHA_RULES}")


@dataclass
class PinvReport:
    iterations_run: int
    residuals: list = field(default_factory=list)
    alpha_used: float = 0.0
    alpha_exponent: int = 0
    # False when no exponent up to the cap satisfied the one-norm test
    alpha_satisfied: bool = True

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())


def _one_norm_excess(a, alphas):
    """``||I - alpha A||_1 - 1`` evaluated without cancellation.

    Column ``j`` contributes ``|1 - alpha a_jj| - 1 + alpha sum_{i != j} |a_ij|``.
    Forming ``1 - alpha a_jj`` directly rounds to 1 once ``alpha`` drops below
    machine epsilon, which would make the test pass vacuously.
    """
    diag = np.diagonal(a, axis1=-2, axis2=-1)[..., None, :]  # (..., 1, m)
    off = (np.abs(a).sum(axis=-2) - np.abs(np.diagonal(a, axis1=-2, axis2=-1)))[..., None, :]
    ad = alphas[..., :, None] * diag
    head = np.where(ad <= 1.0, -ad, ad - 2.0)
    return (head + alphas[..., :, None] * off).max(axis=-1)


def _alpha_search(a, cfg: NewtonConfig):
    """Vectorised alpha rule over any leading batch axes of ``a``.

    Returns ``(alpha, exponent, satisfied)`` arrays shaped like ``a.shape[:-2]``.
    """
    one = np.abs(a).sum(axis=-2).max(axis=-1)
    if np.any(one == 0.0):
        raise DomainError("alpha rule needs a non-zero matrix (||A||_1 = 0)")
    base = 2.0 / (one * one)
    if cfg.alpha_rule == "one_norm":
        exps = np.zeros(one.shape, dtype=int)
        return base, exps, np.ones(one.shape, dtype=bool)

    steps = cfg.beta ** np.arange(cfg.alpha_search_cap + 1)
    alphas = base[..., None] * steps  # (..., K)
    ok = _one_norm_excess(a, alphas) <= 0.0
    satisfied = ok.any(axis=-1)
    exps = np.where(satisfied, ok.argmax(axis=-1), 0)
    alpha = np.take_along_axis(alphas, exps[..., None], axis=-1)[..., 0]
    return alpha, exps, satisfied


def alpha_init(a, cfg: NewtonConfig | None = None):
    """Initial scaling ``alpha`` for the Newton iteration.

    With the default ``beta_search`` rule this is ``2 beta^n / ||A||_1^2``
    for the smallest ``n`` in ``[0, alpha_search_cap]`` with
    ``||I - alpha A||_1 <= 1``.  If no exponent qualifies, the unscaled
    ``2 / ||A||_1^2`` (exponent 0) is returned and ``satisfied`` is False.

    Returns ``(alpha, exponent, satisfied)``.
    """
    cfg = cfg or NewtonConfig()
    a = np.asarray(a, dtype=mc.DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"alpha_init expects a square matrix, got {a.shape}")
    alpha, exp, ok = _alpha_search(a, cfg)
    return float(alpha), int(exp), bool(ok)


# alpha * lambda_max^2 must stay below 2: at exactly 2 the top eigencomponent
# of A_1 is zero and never recovers.
_GUARD = 2.0 * (1.0 - 1e-6)


def _nonnegative_lambda_bound(a, steps=3):
    """Upper bound on ``lambda_max`` for entrywise nonnegative ``A``; ``inf`` otherwise.

    Collatz-Wielandt: ``lambda_max <= max_i (A x)_i / x_i`` for any positive
    ``x``.  A few power steps from the ones vector tighten the bound.
    """
    a = np.asarray(a, dtype=mc.DTYPE)
    bound = np.full(a.shape[:-2], np.inf)
    usable = (a >= 0).all(axis=(-2, -1))
    if not usable.any():
        return bound
    x = np.ones(a.shape[:-1])
    for _ in range(steps):
        y = np.einsum("...ij,...j->...i", a, x)
        usable &= (y > 0).all(axis=-1)
        if not usable.any():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (y / x).max(axis=-1)
            x = y / y.max(axis=-1, keepdims=True)
        bound = np.where(usable, np.minimum(bound, ratio), np.inf)
    return np.where(usable, bound, np.inf)


def safe_alpha(a, cfg: NewtonConfig):
    """``alpha_init`` followed by the convergence guard, batched over leading axes.

    The guard keeps stepping down the beta ladder while
    ``alpha * lambda_max(A)^2 >= 2``.  Returns ``(alpha, exponent, satisfied)``.
    """
    alpha, exps, ok = _alpha_search(a, cfg)
    alpha = np.array(alpha, dtype=float)
    exps = np.array(exps)
    # the cheap bound settles the common case; power iteration only when it is inconclusive
    lam = _nonnegative_lambda_bound(a)
    if np.any(alpha * lam * lam >= _GUARD):
        lam = mc.sym_lambda_max(a)
    bad = alpha * lam * lam >= _GUARD
    while bad.any():
        alpha = np.where(bad, alpha * cfg.beta, alpha)
        exps = np.where(bad, exps + 1, exps)
        bad = alpha * lam * lam >= _GUARD
    return alpha, exps, ok


def convergence_residual(a, a_k, norm_kind="frobenius"):
    """``||A A_k A - A|| / ||A||``."""
    if a.shape != a_k.shape or a.shape[0] != a.shape[1]:
        raise ShapeError(f"residual needs matching square matrices: {a.shape} vs {a_k.shape}")
    return _residual(a, mc.matmul(a_k, a), mc.norm(a, norm_kind), norm_kind)


def _residual(a, a_k_a, a_norm, norm_kind):
    # (A_k A) A: the same product the Newton step needs, so it is formed once
    r = mc.matmul(a_k_a, a)
    r -= a
    return mc.norm(r, norm_kind) / a_norm


def newton_step(a, a_k, a_k_a=None):
    """One step ``2 A_k - A_k A A_k``; pass ``a_k_a = A_k A`` if already known."""
    if a_k_a is None:
        a_k_a = mc.matmul(a_k, a)
    t = mc.matmul(a_k_a, a_k)
    out = mc.new(a_k.shape)
    np.multiply(a_k, 2.0, out=out)
    out -= t
    return out


def newton_pinv(a, cfg: NewtonConfig | None = None):
    """Run exactly ``cfg.max_iters`` Newton steps; return ``(A_T, PinvReport)``.

    Iterates are polynomials in ``A`` and commute with it, so ``A_k A``
    serves both the step and the residual ``A A_k A - A``.
    """
    cfg = cfg or NewtonConfig()
    a = mc.as_matrix(a)
    mc.check_symmetric(a, 1e-8, "newton_pinv input")
    alpha, exp, ok = (x.item() for x in safe_alpha(a, cfg))
    a_norm = mc.norm(a, cfg.norm_kind)

    a_k = mc.new(a.shape)
    np.multiply(a, alpha, out=a_k)
    a_k_a = mc.matmul(a_k, a)
    residuals = [_residual(a, a_k_a, a_norm, cfg.norm_kind)]
    for k in range(1, cfg.max_iters + 1):
        a_k = newton_step(a, a_k, a_k_a)
        a_k_a = mc.matmul(a_k, a)
        res = _residual(a, a_k_a, a_norm, cfg.norm_kind)
        # any inf/nan in A_k reaches every entry of its row in A_k A A, so the scalar suffices
        if not math.isfinite(res):
            raise NumericError(f"non-finite values at Newton iteration {k}", iteration=k)
        residuals.append(res)
    report = PinvReport(cfg.max_iters, residuals, alpha, exp, ok)
    return a_k, report


def eigh_pinv(a, eig_threshold=1e-10):
    """Reference pseudoinverse ``V diag(1/lambda) V^T`` of a symmetric PSD matrix.

    Eigenvalues at or below ``eig_threshold * lambda_max`` are treated as zero.
    """
    a = np.asarray(a, dtype=mc.DTYPE)
    w, v = mc.jacobi_eigh(a)
    lam_max = w.max()
    out = mc.zeros(a.shape)
    if lam_max <= 0.0:
        return out
    keep = w > eig_threshold * lam_max
    vk = v[:, keep]
    np.matmul(vk / w[keep], vk.T, out=out)
    return out


def penrose_errors(a, x):
    """Relative Frobenius violations of the four Penrose conditions.

    Returns ``(|AXA - A|/|A|, |XAX - X|/|X|, |(AX)^T - AX|/|AX|, |(XA)^T - XA|/|XA|)``.
    """

    def rel(num, den):
        d = np.linalg.norm(den)
        return float(np.linalg.norm(num) / d) if d > 0 else float(np.linalg.norm(num))

    ax = a @ x
    xa = x @ a
    return (
        rel(ax @ a - a, a),
        rel(xa @ x - x, x),
        rel(ax.T - ax, ax),
        rel(xa.T - xa, xa),
    )
