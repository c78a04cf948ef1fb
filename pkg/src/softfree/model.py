"""Desk-scale SOFT classifier and a synthetic token-classification task.

The model is ``embed + position -> [pre-norm SOFT layer] x L -> LN ->
mean-pool -> linear``.  Each layer is::

    x = x + Attn(LN(x)) W_out
    x = x + FFN(LN(x))

All forward passes go through :mod:`softfree.autograd`, so the same code
serves inference (no tape) and training (inside a tape).
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import matcore as mc
from .attention import AttentionConfig, soft_attention_var
from .errors import DomainError, NumericError, ShapeError
from .kernel import TokenSequence
from .pinv import NewtonConfig
from .sampling import SPATIAL, spec_for_m

LAYER_FIELDS = (
    "ln1_g", "ln1_b", "w_qk", "w_v", "w_out",
    "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
)


@dataclass
class SoftLayerParams:
    """Weights of one pre-norm SOFT block (attention + 2-layer FFN)."""

    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_qk: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    conv: np.ndarray | None = None

    @classmethod
    def init(cls, d_e, rng, expansion=4, conv_kernel=None):
        """He-style random projections, unit LN scales, zero biases."""
        def dense(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

        hidden = expansion * d_e
        conv = None
        if conv_kernel is not None:
            from .sampling import averaging_stencil

            kk = conv_kernel * conv_kernel
            conv = averaging_stencil(conv_kernel, d_e) + 0.01 * rng.standard_normal((kk * d_e, d_e))
        return cls(
            ln1_g=np.ones(d_e), ln1_b=np.zeros(d_e),
            w_qk=dense(d_e, d_e), w_v=dense(d_e, d_e), w_out=dense(d_e, d_e),
            ln2_g=np.ones(d_e), ln2_b=np.zeros(d_e),
            ffn_w1=dense(d_e, hidden), ffn_b1=np.zeros(hidden),
            ffn_w2=dense(hidden, d_e), ffn_b2=np.zeros(d_e),
            conv=conv,
        )

    def arrays(self):
        out = {name: getattr(self, name) for name in LAYER_FIELDS}
        if self.conv is not None:
            out["conv"] = self.conv
        return out


def _layer(x, p, grid_h, grid_w, cfg: AttentionConfig):
    """Pre-norm SOFT block on ``(..., n, d_e)``; ``p`` maps field name to Var or array."""
    h = ag.layer_norm(x, p["ln1_g"], p["ln1_b"])
    q = ag.linear(h, p["w_qk"])
    v = ag.linear(h, p["w_v"])
    attn = soft_attention_var(q, v, grid_h, grid_w, cfg, p.get("conv"))
    x = ag.add(x, ag.linear(attn, p["w_out"]))
    h = ag.layer_norm(x, p["ln2_g"], p["ln2_b"])
    h = ag.linear(h, p["ffn_w1"], p["ffn_b1"], relu=True)
    return ag.add(x, ag.linear(h, p["ffn_w2"], p["ffn_b2"]))


def soft_layer_forward(x: TokenSequence, params: SoftLayerParams, cfg: AttentionConfig) -> TokenSequence:
    """One pre-norm SOFT block; the grid shape is carried through."""
    if x.d != cfg.d_e or params.w_qk.shape != (cfg.d_e, cfg.d_e):
        raise ShapeError(f"tokens have {x.d} features, layer expects {cfg.d_e}")
    out = _layer(x.features, params.arrays(), x.grid_h, x.grid_w, cfg)
    return TokenSequence(out.value, x.grid_h, x.grid_w)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass
class ToyModelConfig:
    grid_h: int = 8
    grid_w: int = 8
    d_e: int = 64
    heads: int = 2
    layers: int = 2
    m: int = 16
    classes: int = 4
    input_dim: int = 16
    expansion: int = 4
    sampler: str = "avg_pool"
    newton_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DomainError("need at least two classes")
        if self.layers < 0 or self.input_dim < 1:
            raise DomainError("layers must be >= 0 and input_dim >= 1")
        self.attention_config()  # validates heads, sampler and m

    @property
    def n(self):
        return self.grid_h * self.grid_w

    def attention_config(self):
        spec = spec_for_m(self.sampler, self.grid_h, self.grid_w, self.m, self.seed)
        return AttentionConfig(self.d_e, self.heads, spec, NewtonConfig(max_iters=self.newton_iters))

    def to_dict(self):
        return dataclasses.asdict(self)


class ToyModel:
    """Parameters live in a flat ``name -> array`` dict (handy for Adam and I/O)."""

    def __init__(self, cfg: ToyModelConfig, params: dict):
        self.cfg = cfg
        self.attn_cfg = cfg.attention_config()
        self.params = params

    @classmethod
    def init(cls, cfg: ToyModelConfig):
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_e
        params = {
            "embed.w": rng.standard_normal((cfg.input_dim, d)) / np.sqrt(cfg.input_dim),
            "embed.b": np.zeros(d),
            "pos": 0.02 * rng.standard_normal((cfg.n, d)),
        }
        conv_k = cfg.attention_config().sampler.kernel if cfg.sampler == "conv" else None
        for i in range(cfg.layers):
            layer = SoftLayerParams.init(d, rng, cfg.expansion, conv_k)
            params.update({f"layer{i}.{k}": v for k, v in layer.arrays().items()})
        params["final.g"] = np.ones(d)
        params["final.b"] = np.zeros(d)
        params["head.w"] = rng.standard_normal((d, cfg.classes)) / np.sqrt(d)
        params["head.b"] = np.zeros(cfg.classes)
        return cls(cfg, params)

    def layer_params(self, i):
        prefix = f"layer{i}."
        fields = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        return SoftLayerParams(**fields)

    def forward(self, x, params=None, norm_ratios=None):
        """Logits for a ``(B, n, input_dim)`` batch.

        ``params`` may hold Vars (training) and defaults to the stored arrays.
        When ``norm_ratios`` is a list, each layer appends its largest
        per-sample ``|out|_F / |in|_F``.
        """
        p = self.params if params is None else params
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1:] != (cfg.n, cfg.input_dim):
            raise ShapeError(f"expected (B, {cfg.n}, {cfg.input_dim}) inputs, got {x.shape}")
        h = ag.add(ag.linear(x, p["embed.w"], p["embed.b"]), p["pos"])
        for i in range(cfg.layers):
            prefix = f"layer{i}."
            lp = {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}
            out = _layer(h, lp, cfg.grid_h, cfg.grid_w, self.attn_cfg)
            if norm_ratios is not None:
                num = np.sqrt((out.value**2).sum(axis=(-2, -1)))
                den = np.sqrt((h.value**2).sum(axis=(-2, -1)))
                norm_ratios.append(float((num / den).max()))
            h = out
        h = ag.layer_norm(h, p["final.g"], p["final.b"])
        return ag.linear(ag.mean_pool_rows(h), p["head.w"], p["head.b"])

    def predict(self, x, batch_size=64):
        preds = []
        for s in range(0, len(x), batch_size):
            preds.append(self.forward(x[s : s + batch_size]).value.argmax(axis=-1))
        return np.concatenate(preds)

    def accuracy(self, x, y):
        return float(np.mean(self.predict(x) == y))

    def save(self, path):
        save_params(path, self.params)

    def load(self, path):
        loaded = load_params(path)
        if set(loaded) != set(self.params):
            raise ShapeError("parameter names in file do not match the model")
        for k, v in loaded.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: file has {v.shape}, model has {self.params[k].shape}")
        self.params = loaded
        return self


# --------------------------------------------------------------------------
# synthetic task
# --------------------------------------------------------------------------


@dataclass
class SyntheticTask:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    means: np.ndarray
    signal_mask: np.ndarray  # (N, n) bool over train then test samples


def class_means(classes, dim, rng):
    """Orthonormal unit-length class centres (rows)."""
    if classes > dim:
        raise DomainError(f"cannot place {classes} orthogonal means in {dim} dimensions")
    q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
    return q.T.copy()


def make_synthetic_task(
    cfg: ToyModelConfig,
    samples_per_class=192,
    seed=0,
    sigma=0.5,
    signal_fraction=0.25,
    placement="random",
    test_fraction=1 / 3,
    means=None,
):
    """Class-conditioned token sequences.

    A ``signal_fraction`` of the ``n`` positions hold ``mu_c + sigma * eps``;
    the rest hold class-independent noise ``sigma * eps``.  ``placement``
    is ``"random"`` (fresh positions per sample) or ``"last"`` (always the
    final positions in raster order, which first-``m`` sampling never sees).
    Every sample draws from its own child seed.
    """
    if cfg.classes < 2:
        raise DomainError("need at least two classes")
    if placement not in ("random", "last"):
        raise ValueError(f"unknown placement {placement!r}")
    n, dim = cfg.n, cfg.input_dim
    n_sig = max(1, int(round(signal_fraction * n)))
    root = np.random.SeedSequence(seed)
    mean_seed, order_seed, *sample_seeds = root.spawn(2 + samples_per_class * cfg.classes)
    if means is None:
        means = class_means(cfg.classes, dim, np.random.default_rng(mean_seed))
    means = np.asarray(means, dtype=float)

    total = samples_per_class * cfg.classes
    labels = np.repeat(np.arange(cfg.classes), samples_per_class)
    x = np.empty((total, n, dim))
    mask = np.zeros((total, n), dtype=bool)
    for i, (c, ss) in enumerate(zip(labels, sample_seeds)):
        rng = np.random.default_rng(ss)
        x[i] = sigma * rng.standard_normal((n, dim))
        pos = rng.choice(n, n_sig, replace=False) if placement == "random" else np.arange(n - n_sig, n)
        x[i, pos] += means[c]
        mask[i, pos] = True

    perm = np.random.default_rng(order_seed).permutation(total)
    x, labels, mask = x[perm], labels[perm], mask[perm]
    n_test = int(round(test_fraction * total))
    n_train = total - n_test
    return SyntheticTask(x[:n_train], labels[:n_train], x[n_train:], labels[n_train:], means, mask)


def logistic_baseline(task: SyntheticTask, epochs=500, lr=0.5, l2=1e-4):
    """Softmax regression on mean-pooled raw tokens (full-batch gradient descent).

    Returns held-out accuracy; a learnability check for the task.
    """
    xtr = task.x_train.mean(axis=1)
    xte = task.x_test.mean(axis=1)
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-12
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    classes = int(max(task.y_train.max(), task.y_test.max())) + 1
    w = np.zeros((xtr.shape[1], classes))
    b = np.zeros(classes)
    onehot = np.eye(classes)[task.y_train]
    for _ in range(epochs):
        z = xtr @ w + b
        z -= z.max(axis=1, keepdims=True)
        prob = np.exp(z)
        prob /= prob.sum(axis=1, keepdims=True)
        g = (prob - onehot) / len(xtr)
        w -= lr * (xtr.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return float(np.mean((xte @ w + b).argmax(axis=1) == task.y_test))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    final_accuracy: float = 0.0
    wall_time_s: float = 0.0
    seed: int = 0
    epochs: int = 0
    lr: float = 0.0
    batch_size: int = 32
    max_norm_ratio: float = 0.0
    train_accuracy: float = 0.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not all(np.isfinite(self.epoch_losses)):
            raise NumericError("loss curve contains non-finite entries")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class Adam:
    """Adam with bias correction; state is keyed like the parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: ToyModel, task: SyntheticTask, epochs=200, lr=1e-3, seed=0, batch_size=32, log=None):
    """Minibatch Adam on cross-entropy; returns a :class:`TrainReport`.

    Deterministic for a fixed ``seed``: the shuffle order is the only
    randomness.  Raises :class:`NumericError` naming the epoch if the loss
    stops being finite.
    """
    if not (np.isfinite(task.x_train).all() and np.isfinite(task.x_test).all()):
        raise DomainError("training data must be finite")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    n_train = len(task.x_train)
    losses = []
    max_ratio = 0.0
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for s in range(0, n_train, batch_size):
            idx = order[s : s + batch_size]
            pv = {k: ag.Var(v, True, k) for k, v in model.params.items()}
            ratios = []
            with ag.Tape() as tape:
                logits = model.forward(task.x_train[idx], pv, ratios)
                loss = ag.cross_entropy_with_logits(logits, task.y_train[idx])
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericError(f"loss became non-finite in epoch {epoch}", iteration=epoch)
            tape.backward(loss)
            max_ratio = max(max_ratio, *ratios) if ratios else max_ratio
            opt.step(model.params, {k: v.grad for k, v in pv.items() if v.grad is not None})
            total += value * len(idx)
        losses.append(total / n_train)
        if log is not None:
            log(epoch, losses[-1])
    report = TrainReport(
        epoch_losses=losses,
        final_accuracy=model.accuracy(task.x_test, task.y_test),
        wall_time_s=time.perf_counter() - start,
        seed=seed,
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        max_norm_ratio=max_ratio,
        train_accuracy=model.accuracy(task.x_train, task.y_train),
        config=model.cfg.to_dict(),
    )
    return report


# --------------------------------------------------------------------------
# flat binary parameter files
# --------------------------------------------------------------------------

MAGIC = b"SFTPARAM"
FORMAT_VERSION = 1


def save_params(path, params: dict):
    """Write named tensors as little-endian doubles.

    Layout: magic, ``u32`` version, ``u32`` count, then per tensor ``u32``
    name length, UTF-8 name, ``u32`` ndim, ``u64`` dims, raw ``<f8`` data.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_params(path):
    """Inverse of :func:`save_params`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a parameter file")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        version, count = take("<II")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = take("<I")
            shape = take(f"<{ndim}Q")
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise ValueError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            out[name] = mc.copy(arr.astype(mc.DTYPE))
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated parameter file") from exc
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
