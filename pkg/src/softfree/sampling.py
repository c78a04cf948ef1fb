"""Bottleneck (landmark) token samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matcore as mc
from .errors import DomainError, ShapeError
from .kernel import TokenSequence

METHODS = ("avg_pool", "conv", "random", "biased")
SPATIAL = ("avg_pool", "conv")


@dataclass
class SamplerSpec:
    method: str = "avg_pool"
    kernel: int = 2
    target_m: int | None = None
    seed: int = 0
    conv_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown sampler {self.method!r}; expected one of {METHODS}")
        if self.kernel < 1:
            raise ValueError("kernel must be >= 1")

    def bottleneck_size(self, grid_h, grid_w):
        """Number of landmarks this spec yields on a ``grid_h x grid_w`` grid."""
        if self.method in SPATIAL:
            k = self.kernel
            if grid_h % k or grid_w % k:
                raise ShapeError(f"grid {grid_h}x{grid_w} is not divisible by kernel {k}")
            m = (grid_h // k) * (grid_w // k)
            if self.target_m is not None and self.target_m != m:
                raise ShapeError(f"kernel {k} on {grid_h}x{grid_w} gives m={m}, not {self.target_m}")
            return m
        if self.target_m is None or self.target_m < 1:
            raise DomainError(f"{self.method} sampling needs a positive target_m")
        if self.target_m > grid_h * grid_w:
            raise DomainError(f"target_m={self.target_m} exceeds n={grid_h * grid_w}")
        return self.target_m

    def to_dict(self):
        return {"method": self.method, "kernel": self.kernel, "target_m": self.target_m, "seed": self.seed}


def valid_bottlenecks(grid_h, grid_w):
    """Landmark counts reachable by the spatial samplers on this grid."""
    return sorted({(grid_h // k) * (grid_w // k) for k in range(1, min(grid_h, grid_w) + 1)
                   if grid_h % k == 0 and grid_w % k == 0})


def spec_for_m(method, grid_h, grid_w, m, seed=0):
    """Build a spec that yields exactly ``m`` landmarks, or raise with the valid choices."""
    if method not in SPATIAL:
        spec = SamplerSpec(method, 1, m, seed)
        spec.bottleneck_size(grid_h, grid_w)
        return spec
    for k in range(1, min(grid_h, grid_w) + 1):
        if grid_h % k == 0 and grid_w % k == 0 and (grid_h // k) * (grid_w // k) == m:
            return SamplerSpec(method, k, m, seed)
    raise ShapeError(
        f"m={m} is not reachable by {method} on a {grid_h}x{grid_w} grid; "
        f"valid values: {valid_bottlenecks(grid_h, grid_w)}"
    )


# --------------------------------------------------------------------------
# raw feature transforms; leading batch axes allowed, tokens on axis -2
# --------------------------------------------------------------------------


def _windows(x, grid_h, grid_w, k):
    *lead, n, d = x.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"{n} tokens do not fit grid {grid_h}x{grid_w}")
    if grid_h % k or grid_w % k:
        raise ShapeError(f"grid {grid_h}x{grid_w} is not divisible by kernel {k}")
    return x.reshape(*lead, grid_h // k, k, grid_w // k, k, d)


def avg_pool_features(x, grid_h, grid_w, k):
    """Mean over non-overlapping ``k x k`` windows; returns ``(..., m, d)``."""
    win = _windows(x, grid_h, grid_w, k)
    *lead, hk, _, wk, _, d = win.shape
    out = mc.new((*lead, hk, wk, d))
    nl = len(lead)
    np.mean(win, axis=(nl + 1, nl + 3), out=out)
    return out.reshape(*lead, hk * wk, d)


def window_flatten(x, grid_h, grid_w, k):
    """Rearrange into ``(..., m, k*k*d)`` rows: window row-major, channels fastest."""
    win = _windows(x, grid_h, grid_w, k)
    *lead, hk, _, wk, _, d = win.shape
    nl = len(lead)
    perm = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = mc.new((*lead, hk, wk, k, k, d))
    out[...] = win.transpose(perm)
    return out.reshape(*lead, hk * wk, k * k * d)


def window_unflatten(g, grid_h, grid_w, k):
    """Adjoint of :func:`window_flatten`."""
    *lead, m, kkd = g.shape
    d = kkd // (k * k)
    hk, wk = grid_h // k, grid_w // k
    nl = len(lead)
    g = g.reshape(*lead, hk, wk, k, k, d)
    perm = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(g.transpose(perm)).reshape(*lead, grid_h * grid_w, d)


def sample_indices(method, n, m, seed=0):
    """Row indices picked by the index-based samplers (ascending order)."""
    if m > n:
        raise DomainError(f"cannot pick {m} of {n} tokens")
    if method == "biased":
        return np.arange(m)
    if method == "random":
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(n, size=m, replace=False))
    raise ValueError(f"{method!r} is not an index sampler")


def averaging_stencil(k, d):
    """Conv weights (``k*k*d x d``) that reproduce average pooling."""
    w = np.zeros((k * k, d, d))
    w[:, np.arange(d), np.arange(d)] = 1.0 / (k * k)
    return w.reshape(k * k * d, d)


def init_conv_weights(k, d, seed, noise=0.01):
    """Averaging stencil plus small seeded Gaussian noise."""
    rng = np.random.default_rng(seed)
    return averaging_stencil(k, d) + noise * rng.standard_normal((k * k * d, d))


# --------------------------------------------------------------------------
# public samplers
# --------------------------------------------------------------------------


def conv_sample(q: TokenSequence, spec: SamplerSpec) -> TokenSequence:
    """Strided ``k x k`` convolution without bias (one token per window)."""
    k = spec.kernel
    d = q.d
    w = spec.conv_weights
    if w is None:
        raise ShapeError("conv sampling needs conv_weights")
    if w.shape != (k * k * d, d):
        raise ShapeError(f"conv_weights must be {(k * k * d, d)}, got {w.shape}")
    spec.bottleneck_size(q.grid_h, q.grid_w)
    flat = window_flatten(q.features, q.grid_h, q.grid_w, k)
    out = mc.matmul(flat, w)
    return TokenSequence(out, q.grid_h // k, q.grid_w // k)


def sample(q: TokenSequence, spec: SamplerSpec) -> TokenSequence:
    """Pick the ``m`` bottleneck tokens of ``q`` according to ``spec``."""
    m = spec.bottleneck_size(q.grid_h, q.grid_w)
    if spec.method == "avg_pool":
        k = spec.kernel
        return TokenSequence(avg_pool_features(q.features, q.grid_h, q.grid_w, k), q.grid_h // k, q.grid_w // k)
    if spec.method == "conv":
        return conv_sample(q, spec)
    idx = sample_indices(spec.method, q.n, m, spec.seed)
    out = mc.new((m, q.d))
    np.take(q.features, idx, axis=0, out=out)
    return TokenSequence(out, m, 1)
