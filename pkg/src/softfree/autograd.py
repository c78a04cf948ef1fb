"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Forward passes call the same matcore/kernel/sampling routines as the plain
numeric path, so values agree bit for bit.  Operations record themselves on
the innermost active :class:`Tape`; outside a tape they just compute.

    with Tape() as tape:
        loss = ag.sum(ag.matmul(x, w))
    tape.backward(loss)
    x.grad
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from . import matcore as mc
from . import sampling
from .errors import ShapeError, UsageError

_ids = itertools.count()
_tapes: contextvars.ContextVar[tuple] = contextvars.ContextVar("softfree_tapes", default=())


class Var:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "node_id", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=mc.DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._token = None

    def __enter__(self):
        self._token = _tapes.set(_tapes.get() + (self,))
        return self

    def __exit__(self, *exc):
        _tapes.reset(self._token)
        return False

    def backward(self, loss: Var, seed=None):
        """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf."""
        if not self.nodes or loss.backward_fn is None or not any(n is loss for n in self.nodes):
            raise UsageError("backward() called on a value that was not produced on this tape")
        loss.grad = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=mc.DTYPE)
        end = max(i for i, n in enumerate(self.nodes) if n is loss)
        for node in reversed(self.nodes[: end + 1]):
            if node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _sum_to(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


def as_var(x):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=mc.DTYPE))


def _record(value, parents, backward_fn):
    out = Var(value)
    if any(p.requires_grad for p in parents):
        tapes = _tapes.get()
        if tapes:
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
            tapes[-1].nodes.append(out)
    return out


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = mc.matmul(av, bv)

    def back(g):
        ga = g @ _swap(bv)
        if bv.ndim == 2 and av.ndim > 2:
            # shared weight: fold the batch into one GEMM instead of summing slices
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(av) @ g
        return ga, gb

    return _record(out, (a, b), back)


def linear(x, w, b=None, relu=False):
    """``x @ w + b`` with an optional fused ReLU, recorded as a single node.

    ``w`` is a shared 2-D weight; ``x`` may carry leading batch axes.
    """
    x, w = as_var(x), as_var(w)
    parents = (x, w) if b is None else (x, w, as_var(b))
    xv, wv = x.value, w.value
    if wv.ndim != 2:
        raise ShapeError(f"linear expects a 2-D weight, got {wv.shape}")
    out = mc.matmul(xv, wv)
    if b is not None:
        out += parents[2].value
    if relu:
        np.maximum(out, 0.0, out=out)

    def back(g):
        if relu:
            g = g * (out > 0.0)
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, back)


def transpose(a):
    a = as_var(a)
    return _record(mc.transpose(a.value), (a,), lambda g: (_swap(g),))


def _broadcast_out(x, y):
    try:
        return mc.new(np.broadcast_shapes(x.shape, y.shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} with {y.shape}") from exc


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = _broadcast_out(a.value, b.value)
    np.add(a.value, b.value, out=out)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = _broadcast_out(a.value, b.value)
    np.subtract(a.value, b.value, out=out)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = _broadcast_out(av, bv)
    np.multiply(av, bv, out=out)
    return _record(out, (a, b), lambda g: (g * bv, g * av))


def scalar_mul(a, c):
    a = as_var(a)
    c = float(c)
    out = mc.new(a.value.shape)
    np.multiply(a.value, c, out=out)
    return _record(out, (a,), lambda g: (g * c,))


def neg(a):
    return scalar_mul(a, -1.0)


def sum(a):
    a = as_var(a)
    shape = a.value.shape
    return _record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a, shape):
    a = as_var(a)
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# elementwise nonlinearities
# --------------------------------------------------------------------------


def exp(a):
    a = as_var(a)
    out = mc.copy(a.value)
    np.exp(out, out=out)
    return _record(out, (a,), lambda g: (g * out,))


def relu(a):
    a = as_var(a)
    out = mc.new(a.value.shape)
    np.maximum(a.value, 0.0, out=out)
    mask = a.value > 0
    return _record(out, (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# kernel pieces
# --------------------------------------------------------------------------


def pairwise_sq_dist(a, b):
    """Differentiable :func:`softfree.kernel.pairwise_sq_dist`.

    Passing the same ``Var`` twice keeps the exactly-symmetric forward; the
    two parent slots then both accumulate into it.
    """
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = kernel.pairwise_sq_dist(av, bv if b is not a else av)

    def back(g):
        # d/da_i sum_j g_ij |a_i - b_j|^2 = 2 (a_i sum_j g_ij - sum_j g_ij b_j)
        ga = 2.0 * (av * g.sum(axis=-1)[..., :, None] - g @ bv)
        gb = 2.0 * (bv * g.sum(axis=-2)[..., :, None] - _swap(g) @ av)
        return ga, gb

    return _record(out, (a, b), back)


def gaussian_attention(q, k, d_e=None):
    """``exp(scale * pairwise_sq_dist(q, k))``, matching the kernel module."""
    q = as_var(q)
    if d_e is None:
        d_e = q.value.shape[-1]
    return exp(scalar_mul(pairwise_sq_dist(q, k), kernel.gaussian_scale(d_e)))


def one_norm_scale(a, alpha):
    """Lift a precomputed ``alpha``, proportional to ``||A||_1^-2``, onto the tape as ``(..., 1, 1)``.

    The forward value is ``alpha`` unchanged.  ``||A||_1`` is the largest
    absolute column sum, so the gradient reaches the maximising column only.
    """
    a = as_var(a)
    av = a.value
    alpha = np.asarray(alpha, dtype=mc.DTYPE)[..., None, None]
    colsum = np.abs(av).sum(axis=-2)
    top = colsum.argmax(axis=-1)
    n1 = colsum.max(axis=-1)[..., None, None]
    mask = (np.arange(av.shape[-1]) == top[..., None])[..., None, :]

    def back(g):
        g = g.sum(axis=(-2, -1), keepdims=True)
        return (g * (-2.0 * alpha / n1) * np.sign(av) * mask,)

    return _record(mc.copy(alpha), (a,), back)


# --------------------------------------------------------------------------
# token rearrangements
# --------------------------------------------------------------------------


def avg_pool(x, grid_h, grid_w, k):
    """Mean over non-overlapping ``k x k`` token windows."""
    x = as_var(x)
    out = sampling.avg_pool_features(x.value, grid_h, grid_w, k)
    shape = x.value.shape

    def back(g):
        *lead, _, d = g.shape
        g = g.reshape(*lead, grid_h // k, 1, grid_w // k, 1, d) / (k * k)
        g = np.broadcast_to(g, (*lead, grid_h // k, k, grid_w // k, k, d))
        return (g.reshape(shape),)

    return _record(out, (x,), back)


def window_flatten(x, grid_h, grid_w, k):
    x = as_var(x)
    out = sampling.window_flatten(x.value, grid_h, grid_w, k)
    return _record(out, (x,), lambda g: (sampling.window_unflatten(g, grid_h, grid_w, k),))


def gather_rows(x, idx):
    x = as_var(x)
    idx = np.asarray(idx)
    out = mc.new((*x.value.shape[:-2], len(idx), x.value.shape[-1]))
    np.take(x.value, idx, axis=-2, out=out)
    shape = x.value.shape

    def back(g):
        full = np.zeros(shape)
        full[..., idx, :] = g  # indices are unique
        return (full,)

    return _record(out, (x,), back)


def slice_cols(x, start, stop):
    x = as_var(x)
    out = mc.copy(x.value[..., start:stop])
    shape = x.value.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (x,), back)


def concat_cols(parts):
    parts = [as_var(p) for p in parts]
    widths = [p.value.shape[-1] for p in parts]
    out = mc.new((*parts[0].value.shape[:-1], int(np.sum(widths))))
    np.concatenate([p.value for p in parts], axis=-1, out=out)
    splits = np.cumsum(widths)[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=-1)))


# --------------------------------------------------------------------------
# normalisation, pooling, loss
# --------------------------------------------------------------------------


def row_mean(x):
    """Mean across the last axis, kept as a column."""
    x = as_var(x)
    d = x.value.shape[-1]
    out = x.value.mean(axis=-1, keepdims=True)
    return _record(out, (x,), lambda g: (np.broadcast_to(g / d, x.value.shape),))


def mean_pool_rows(x):
    """Average over tokens: ``(..., n, d) -> (..., d)``."""
    x = as_var(x)
    n = x.value.shape[-2]
    out = x.value.mean(axis=-2)
    shape = x.value.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g[..., None, :] / n, shape),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalisation with learned scale and shift."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    xv = x.value
    xhat = xv - xv.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xhat, xhat)[..., None] / xv.shape[-1] + eps)
    xhat *= inv
    out = mc.new(xv.shape)
    np.multiply(xhat, gamma.value, out=out)
    out += beta.value

    def back(g):
        gx_hat = g * gamma.value
        proj = np.einsum("...i,...i->...", gx_hat, xhat)[..., None] / xv.shape[-1]
        gx = gx_hat - gx_hat.mean(axis=-1, keepdims=True)
        gx -= xhat * proj
        gx *= inv
        return gx, g * xhat, g

    return _record(out, (x, gamma, beta), back)


def cross_entropy_with_logits(logits, labels):
    """Mean softmax cross-entropy over the rows of ``logits``."""
    logits = as_var(logits)
    labels = np.asarray(labels)
    z = logits.value
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise ShapeError(f"logits {z.shape} do not match {len(labels)} labels")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - log_norm
    rows = np.arange(len(labels))
    loss = np.asarray(-logp[rows, labels].mean())

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / len(labels),)

    return _record(loss, (logits,), back)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.tol


def relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor * max|a|)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / den).max())


def _value(f):
    out = f()
    return float(out.value if isinstance(out, Var) else out)


def grad_check(f, params, h=1e-5, tol=1e-4, floor=1e-8):
    """Compare tape gradients with central finite differences.

    ``f`` takes no arguments and returns a scalar ``Var`` computed from
    ``params`` (leaf Vars with ``requires_grad``).  Parameter arrays are
    perturbed in place and restored.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else np.array(p.grad) for p in params]

    if _value(f) != _value(f):
        raise UsageError("grad_check needs a deterministic function")

    report = GradCheckReport(tol=tol)
    for i, (p, a) in enumerate(zip(params, analytic)):
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _value(f)
            flat[j] = orig - h
            fm = _value(f)
            flat[j] = orig
            num.reshape(-1)[j] = (fp - fm) / (2.0 * h)
        report.errors[p.name or f"param{i}"] = relative_error(a, num, floor)
    return report
