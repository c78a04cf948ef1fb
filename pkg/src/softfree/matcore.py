"""Dense float64 matrix helpers with buffer accounting.

Matrices are plain ``numpy.ndarray`` objects.  Every buffer created by this
package goes through :func:`new`, which reports its size to the active
allocation-tracking scopes.  Releases are observed with ``weakref.finalize``,
so under CPython reference counting the live/peak numbers are exact and
deterministic.

Most helpers accept stacked matrices ``(..., rows, cols)`` so the training
code can carry a leading batch axis; the last two axes are always the
matrix axes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import weakref
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

Matrix = np.ndarray

DTYPE = np.float64

SPECTRAL_MAX_ITERS = 1000
SPECTRAL_RTOL = 1e-8
JACOBI_OFF_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


# --------------------------------------------------------------------------
# allocation accounting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AllocStats:
    peak_live_bytes: int
    total_allocated_bytes: int
    allocation_count: int


class _Scope:
    __slots__ = ("live", "peak", "total", "count")

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0
        self.count = 0

    def alloc(self, nbytes):
        self.live += nbytes
        self.total += nbytes
        self.count += 1
        if self.live > self.peak:
            self.peak = self.live

    def release(self, nbytes):
        self.live -= nbytes

    def stats(self):
        return AllocStats(self.peak, self.total, self.count)


_active: contextvars.ContextVar[tuple[_Scope, ...]] = contextvars.ContextVar(
    "softfree_alloc_scopes", default=()
)


def _release(scopes, nbytes):
    for s in scopes:
        s.release(nbytes)


def register(arr: np.ndarray) -> np.ndarray:
    """Charge ``arr``'s buffer to every active tracking scope."""
    scopes = _active.get()
    if scopes and arr.nbytes:
        for s in scopes:
            s.alloc(arr.nbytes)
        weakref.finalize(arr, _release, scopes, arr.nbytes)
    return arr


class AllocTracker:
    """Handle returned by :func:`track_allocations`."""

    def __init__(self, scope):
        self._scope = scope

    def stats(self) -> AllocStats:
        return self._scope.stats()


@contextlib.contextmanager
def track_allocations():
    """Measure buffer allocations made inside the ``with`` block.

    Scopes nest: an allocation is charged to the innermost scope and to every
    enclosing one, so each scope reports exactly the work done inside it.
    """
    scope = _Scope()
    token = _active.set(_active.get() + (scope,))
    try:
        yield AllocTracker(scope)
    finally:
        _active.reset(token)


def with_alloc_tracking(work, *args, **kwargs):
    """Run ``work(*args, **kwargs)`` and return ``(result, AllocStats)``."""
    with track_allocations() as tracker:
        result = work(*args, **kwargs)
    return result, tracker.stats()


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def new(shape) -> Matrix:
    """Uninitialised tracked buffer."""
    return register(np.empty(shape, dtype=DTYPE))


def zeros(shape) -> Matrix:
    return register(np.zeros(shape, dtype=DTYPE))


def eye(n: int) -> Matrix:
    return register(np.eye(n, dtype=DTYPE))


def copy(a) -> Matrix:
    out = new(np.shape(a))
    out[...] = a
    return out


def as_matrix(a) -> Matrix:
    """Coerce to a C-contiguous float64 array with at least two axes."""
    if isinstance(a, np.ndarray) and a.dtype == DTYPE and a.flags.c_contiguous:
        arr = a
    else:
        arr = register(np.array(a, dtype=DTYPE, order="C"))
    if arr.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    return arr


def _check_matrix(a, name="a"):
    if a.ndim < 2:
        raise ShapeError(f"{name} must have at least 2 axes, got shape {a.shape}")


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------


def transpose(a: Matrix) -> Matrix:
    """Transpose of the trailing two axes (a view, no new buffer)."""
    _check_matrix(a)
    return np.swapaxes(a, -1, -2)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    _check_matrix(a, "a")
    _check_matrix(b, "b")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 2:
        out = new((a.shape[0], b.shape[1]))
        np.matmul(a, b, out=out)
        return out
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch axes {a.shape} vs {b.shape}") from exc
    out = new(batch + (a.shape[-2], b.shape[-1]))
    np.matmul(a, b, out=out)
    return out


def row_sq_norms(a: Matrix) -> np.ndarray:
    """Squared Euclidean norm of every row, without an elementwise temporary."""
    out = new(a.shape[:-1])
    np.einsum("...ij,...ij->...i", a, a, out=out)
    return out


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------


def spectral_norm(a: Matrix, max_iters=SPECTRAL_MAX_ITERS, rtol=SPECTRAL_RTOL, seed=0) -> float:
    """Largest singular value by power iteration on ``a.T @ a``."""
    v = np.random.default_rng(seed).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    prev = 0.0
    sigma = 0.0
    for _ in range(max_iters):
        w = a @ v
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return 0.0
        v = a.T @ w
        v /= np.linalg.norm(v)
        if abs(sigma - prev) <= rtol * sigma:
            break
        prev = sigma
    return sigma


def sym_lambda_max(a, max_iters=SPECTRAL_MAX_ITERS, rtol=SPECTRAL_RTOL, seed=0):
    """Largest eigenvalue of symmetric PSD matrices by power iteration.

    Vectorised over leading batch axes; returns an array of shape
    ``a.shape[:-2]`` (a 0-d array for a single matrix).
    """
    a = np.asarray(a, dtype=DTYPE)
    n = a.shape[-1]
    v = np.broadcast_to(np.random.default_rng(seed).standard_normal(n), a.shape[:-1]).copy()
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    lam = np.zeros(a.shape[:-2])
    for _ in range(max_iters):
        w = np.einsum("...ij,...j->...i", a, v)
        new_lam = np.einsum("...i,...i->...", v, w)
        size = np.linalg.norm(w, axis=-1, keepdims=True)
        if np.all(size == 0.0):
            return np.zeros(a.shape[:-2])
        v = w / np.where(size == 0.0, 1.0, size)
        done = np.all(np.abs(new_lam - lam) <= rtol * np.abs(new_lam))
        lam = new_lam
        if done:
            break
    return lam


def norm(a: Matrix, kind: str = "frobenius") -> float:
    """Matrix norm of a 2-D array.

    ``kind`` is one of ``"one"`` (max absolute column sum), ``"inf"`` (max
    absolute row sum), ``"frobenius"`` or ``"spectral"``.
    """
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"norm expects a 2-D matrix, got shape {a.shape}")
    if a.size == 0:
        raise ShapeError("norm of an empty matrix")
    if kind == "one":
        return float(np.abs(a).sum(axis=0).max())
    if kind == "inf":
        return float(np.abs(a).sum(axis=1).max())
    if kind == "frobenius":
        return math.sqrt(float(np.vdot(a, a)))
    if kind == "spectral":
        return spectral_norm(a)
    raise ValueError(f"unknown norm kind {kind!r}")


# --------------------------------------------------------------------------
# symmetric eigendecomposition
# --------------------------------------------------------------------------


def check_symmetric(a: Matrix, tol: float, what="matrix"):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"{what} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    asym = float(np.abs(a - a.T).max(initial=0.0))
    if asym > tol * scale:
        raise DomainError(f"{what} is not symmetric (max |a - a.T| = {asym:.3g})")


def _round_robin(n):
    """Disjoint index pairs per round; every pair meets once per sweep."""
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: Matrix, tol: float = 1e-10):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations within a round act on disjoint index pairs, so a whole round is
    applied with vectorised row/column updates.  Sweeps stop when the
    off-diagonal Frobenius mass falls below ``1e-12 * ||a||_F`` or after 100
    sweeps.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns, so ``a ~= V @ diag(w) @ V.T``.
    """
    a = np.asarray(a, dtype=DTYPE)
    check_symmetric(a, tol)
    n = a.shape[0]
    work = copy(a)
    work += a.T
    work *= 0.5
    vecs = eye(n)
    if n == 1:
        return work.diagonal().copy(), vecs

    total = float(np.sqrt(np.einsum("ij,ij->", work, work)))
    rounds = _round_robin(n)
    for _ in range(JACOBI_MAX_SWEEPS):
        offdiag = work[~np.eye(n, dtype=bool)]
        if np.sqrt(offdiag @ offdiag) <= JACOBI_OFF_TOL * total:
            break
        for p, q in rounds:
            apq = work[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            app = work[p, p]
            aqq = work[q, q]
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(1.0, theta))
            # |theta| overflow means apq is negligible; t -> 0 is the right limit
            t = np.where(active & np.isfinite(t), t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            cp, cq = work[:, p], work[:, q]
            work[:, p], work[:, q] = c * cp - s * cq, s * cp + c * cq
            rp, rq = work[p, :], work[q, :]
            work[p, :], work[q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = vecs[:, p], vecs[:, q]
            vecs[:, p], vecs[:, q] = c * vp - s * vq, s * vp + c * vq

    w = work.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], register(np.ascontiguousarray(vecs[:, order]))
