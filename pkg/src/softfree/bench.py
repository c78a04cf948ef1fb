"""Benchmark drivers, run configuration and output writers.

Each ``run_*`` function returns plain rows (lists of dicts) so the CLI, the
tests and the demo scripts share one code path.  Memory numbers come from
:mod:`softfree.matcore` accounting, never from the OS.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import statistics
import timeit
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import matcore as mc
from .attention import AttentionConfig, exact_attention, nystrom_parts, soft_attention
from .errors import DomainError, ShapeError
from .kernel import TokenSequence, gaussian_attention_matrix
from .model import ToyModel, ToyModelConfig, make_synthetic_task, train
from .pinv import NewtonConfig, newton_pinv
from .sampling import METHODS, averaging_stencil, avg_pool_features, spec_for_m, valid_bottlenecks

MECHANISMS = ("soft", "exact_gaussian", "softmax_exact")
EXACT_N_GUARD = 8192

SCALING_HEADER = ("mechanism", "n", "m", "d_e", "wall_time_s", "peak_bytes", "repeats", "seed")
PINV_HEADER = ("m", "trial", "iter", "residual")
ABLATE_HEADER = ("axis", "value", "final_accuracy", "train_seconds", "peak_bytes")


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------


@dataclass
class TrainSection:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    samples_per_class: int = 192
    sigma: float = 0.5
    signal_fraction: float = 0.25
    placement: str = "random"


@dataclass
class ScalingSection:
    n_list: list = field(default_factory=lambda: [1024, 2048, 4096, 8192])
    m: int = 49
    d_e: int = 64
    heads: int = 1
    sampler: str = "random"
    grid_w: int = 32
    mechanisms: list = field(default_factory=lambda: list(MECHANISMS))
    repeats: int = 3


@dataclass
class PinvSection:
    m_list: list = field(default_factory=lambda: [49])
    trials: int = 100
    token_dim: int = 32
    pool: int = 2


@dataclass
class AblateSection:
    axis: str = "sampling"
    values: list = field(default_factory=lambda: list(METHODS))


@dataclass
class HeatmapSection:
    grid_h: int = 16
    grid_w: int = 16
    d_e: int = 16
    heads: int = 1
    sampler: str = "avg_pool"
    m: int = 64
    query_index: int = 0
    length_scale: float = 2.0


@dataclass
class RunConfig:
    seed: int = 0
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    model: dict = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    scaling: ScalingSection = field(default_factory=ScalingSection)
    pinv: PinvSection = field(default_factory=PinvSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    heatmap: HeatmapSection = field(default_factory=HeatmapSection)

    def model_config(self, **overrides):
        fields = {**self.model, "seed": self.seed, "newton_iters": self.newton.max_iters, **overrides}
        return ToyModelConfig(**fields)

    def to_dict(self):
        return dataclasses.asdict(self)


SECTIONS = {
    "newton": NewtonConfig,
    "model": ToyModelConfig,
    "train": TrainSection,
    "scaling": ScalingSection,
    "pinv": PinvSection,
    "ablate": AblateSection,
    "heatmap": HeatmapSection,
}
# set from the top level or derived, not per section
_MODEL_RESERVED = ("seed", "newton_iters")


class ConfigError(ValueError):
    """Config file problem, with the offending key and line when known."""


def _line_of(text, key):
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return lineno
    return None


def _where(text, key):
    line = _line_of(text, key)
    return f"line {line}" if line else "unknown line"


def _check_type(path, value, default, text):
    key = path.rsplit(".", 1)[-1]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str) or default is None:
        ok = isinstance(value, str) or (default is None and value is None)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(
            f"{_where(text, key)}: key '{path}' expects {type(default).__name__}, got {type(value).__name__}"
        )
    return value


def _build_section(name, cls, data, text):
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(text, name)}: section '{name}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    if cls is ToyModelConfig:
        known = {k: v for k, v in known.items() if k not in _MODEL_RESERVED}
    for key in data:
        if key not in known:
            raise ConfigError(
                f"{_where(text, key)}: unknown key '{name}.{key}'; expected one of {sorted(known)}"
            )
    values = {}
    for key, value in data.items():
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        values[key] = _check_type(f"{name}.{key}", value, default, text)
    if cls is ToyModelConfig:
        return values  # validated once seed and Newton settings are known
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{_where(text, name)}: section '{name}': {exc}") from exc


def parse_run_config(text):
    """Parse a JSON RunConfig; unknown keys and wrong types are errors.

    Absent keys keep their defaults.  Error messages name the key and the
    line it appears on.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key == "seed":
            kwargs["seed"] = _check_type("seed", value, 0, text)
        elif key in SECTIONS:
            kwargs[key] = _build_section(key, SECTIONS[key], value, text)
        else:
            raise ConfigError(
                f"{_where(text, key)}: unknown key '{key}'; expected seed or one of {sorted(SECTIONS)}"
            )
    cfg = RunConfig(**kwargs)
    try:
        cfg.model_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{_where(text, 'model')}: section 'model': {exc}") from exc
    return cfg


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_run_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# data generators
# --------------------------------------------------------------------------


def _grid_factors(m):
    """``(a, b)`` with ``a * b == m`` and ``a`` the largest divisor not above sqrt(m)."""
    a = max(d for d in range(1, math.isqrt(m) + 1) if m % d == 0)
    return a, m // a


def gram_from_token_field(m, rng, token_dim=32, pool=2):
    """Gaussian-kernel Gram matrix of ``m`` pooled landmarks.

    Unit-normal tokens on a ``(pool*a) x (pool*b)`` grid are average-pooled
    with a ``pool x pool`` window to ``a * b = m`` landmarks, mirroring how
    the attention layer forms ``A``.
    """
    a, b = _grid_factors(m)
    h, w = pool * a, pool * b
    tokens = rng.standard_normal((h * w, token_dim))
    landmarks = avg_pool_features(tokens, h, w, pool)
    return gaussian_attention_matrix(landmarks, landmarks, token_dim)


def smooth_token_field(grid_h, grid_w, d, rng, length_scale=2.0):
    """Spatially smooth random tokens: white noise blurred over the grid, standardised per feature."""
    noise = rng.standard_normal((grid_h, grid_w, d))
    field_ = gaussian_filter(noise, sigma=(length_scale, length_scale, 0), mode="wrap")
    field_ -= field_.mean(axis=(0, 1))
    field_ /= field_.std(axis=(0, 1))
    return field_.reshape(grid_h * grid_w, d)


# --------------------------------------------------------------------------
# bench-scaling
# --------------------------------------------------------------------------


def _median_time(fn, repeats):
    """Seconds per call: median over ``repeats`` timed loops.

    ``timeit``'s autorange (which doubles as the warm-up) picks a loop count
    so each repeat lasts at least 0.2 s; millisecond calls are otherwise
    dominated by scheduler jitter.
    """
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return statistics.median(timer.repeat(repeat=repeats, number=number)) / number


def run_scaling(sec: ScalingSection, newton: NewtonConfig, seed=0, force=False, timing=True):
    """Time and memory of each mechanism for every ``n`` in ``sec.n_list``."""
    n_list = list(sec.n_list)
    if n_list != sorted(n_list) or len(set(n_list)) != len(n_list):
        raise DomainError(f"n_list must be strictly ascending, got {n_list}")
    if sec.repeats < 3:
        raise DomainError("repeats must be >= 3")
    unknown = set(sec.mechanisms) - set(MECHANISMS)
    if unknown:
        raise DomainError(f"unknown mechanisms {sorted(unknown)}; expected {MECHANISMS}")
    for n in n_list:
        if n % sec.grid_w:
            raise ShapeError(f"n={n} is not a multiple of grid width {sec.grid_w}")
        if n > EXACT_N_GUARD and not force and any(mech != "soft" for mech in sec.mechanisms):
            raise DomainError(f"exact mechanisms refuse n={n} > {EXACT_N_GUARD}; pass --force to override")

    rows = []
    for mech in sec.mechanisms:
        for n in n_list:
            grid_h = n // sec.grid_w
            rng = np.random.default_rng(seed)
            q = TokenSequence(rng.standard_normal((n, sec.d_e)), grid_h, sec.grid_w)
            v = TokenSequence(rng.standard_normal((n, sec.d_e)), grid_h, sec.grid_w)
            spec = spec_for_m(sec.sampler, grid_h, sec.grid_w, sec.m, seed)
            cfg = AttentionConfig(sec.d_e, sec.heads, spec, newton)
            if mech == "soft":
                def work():
                    return soft_attention(q, v, cfg).values_out
            else:
                def work(mech=mech):
                    return exact_attention(q, v, cfg, mech)
            _, stats = mc.with_alloc_tracking(work)
            wall = _median_time(work, sec.repeats) if timing else 0.0
            rows.append({
                "mechanism": mech, "n": n, "m": sec.m if mech == "soft" else n, "d_e": sec.d_e,
                "wall_time_s": wall, "peak_bytes": stats.peak_live_bytes,
                "repeats": sec.repeats, "seed": seed,
            })
    return rows


def doubling_ratios(rows, mechanism, key):
    """``value(2n) / value(n)`` over consecutive doublings for one mechanism."""
    pts = sorted((r["n"], r[key]) for r in rows if r["mechanism"] == mechanism)
    return [b[1] / a[1] for a, b in zip(pts, pts[1:]) if b[0] == 2 * a[0]]


# --------------------------------------------------------------------------
# bench-pinv
# --------------------------------------------------------------------------


def run_pinv(sec: PinvSection, newton: NewtonConfig, seed=0):
    """Full Newton residual trace for ``sec.trials`` random Grams per ``m``."""
    if sec.trials < 1:
        raise DomainError("trials must be >= 1")
    rows = []
    for m in sec.m_list:
        children = np.random.SeedSequence([seed, m]).spawn(sec.trials)
        for trial, child in enumerate(children):
            a = gram_from_token_field(m, np.random.default_rng(child), sec.token_dim, sec.pool)
            _, report = newton_pinv(a, newton)
            rows.extend({"m": m, "trial": trial, "iter": k, "residual": r} for k, r in enumerate(report.residuals))
    return rows


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


def run_ablation(cfg: RunConfig, axis=None, values=None, timing=True, log=None):
    """Train the toy model once per ablation value with a fixed seed."""
    axis = axis or cfg.ablate.axis
    values = list(cfg.ablate.values if values is None else values)
    base = cfg.model_config()
    if axis == "bottleneck":
        values = [int(v) for v in values]
        for m in values:
            if m not in valid_bottlenecks(base.grid_h, base.grid_w):
                raise ShapeError(
                    f"m={m} is not reachable on a {base.grid_h}x{base.grid_w} grid; "
                    f"valid values: {valid_bottlenecks(base.grid_h, base.grid_w)}"
                )
    elif axis == "sampling":
        bad = [v for v in values if v not in METHODS]
        if bad:
            raise DomainError(f"unknown sampling methods {bad}; expected {METHODS}")
    else:
        raise DomainError(f"unknown ablation axis {axis!r}; expected 'bottleneck' or 'sampling'")

    t = cfg.train
    rows = []
    for value in values:
        mcfg = cfg.model_config(**({"m": value} if axis == "bottleneck" else {"sampler": value}))
        task = make_synthetic_task(mcfg, t.samples_per_class, cfg.seed, t.sigma, t.signal_fraction, t.placement)
        model = ToyModel.init(mcfg)
        report, stats = mc.with_alloc_tracking(train, model, task, t.epochs, t.lr, cfg.seed, t.batch_size)
        row = {
            "axis": axis, "value": value, "final_accuracy": report.final_accuracy,
            "train_seconds": report.wall_time_s if timing else 0.0, "peak_bytes": stats.peak_live_bytes,
        }
        rows.append(row)
        if log is not None:
            log(row)
    return rows


# --------------------------------------------------------------------------
# heatmap
# --------------------------------------------------------------------------


def heatmap_rows(tokens, sec: HeatmapSection, newton: NewtonConfig, seed=0):
    """Query row of the reconstructed and the exact attention, as ``H x W`` grids.

    With several heads the per-head rows are averaged.
    """
    tokens = np.asarray(tokens, dtype=float)
    n, d = tokens.shape
    if n != sec.grid_h * sec.grid_w:
        raise ShapeError(f"{n} tokens do not fit grid {sec.grid_h}x{sec.grid_w}")
    if not 0 <= sec.query_index < n:
        raise DomainError(f"query_index {sec.query_index} is outside [0, {n})")
    spec = spec_for_m(sec.sampler, sec.grid_h, sec.grid_w, sec.m, seed)
    if spec.method == "conv":
        spec.conv_weights = averaging_stencil(spec.kernel, d)
    cfg = AttentionConfig(d, sec.heads, spec, newton)
    parts = nystrom_parts(TokenSequence(tokens, sec.grid_h, sec.grid_w), cfg)
    i = sec.query_index
    soft = np.mean([s_hat[i] for s_hat, _, _, _ in parts], axis=0)
    exact = np.mean([s[i] for _, s, _, _ in parts], axis=0)
    return soft.reshape(sec.grid_h, sec.grid_w), exact.reshape(sec.grid_h, sec.grid_w)


def pearson(a, b):
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    """UTF-8, comma-separated, ``\\n`` line endings, floats at full precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


def write_pgm(path, grid):
    """8-bit binary PGM (P5), min-max normalised; a flat grid renders black."""
    g = np.asarray(grid, dtype=float)
    lo, hi = float(g.min()), float(g.max())
    scaled = np.zeros(g.shape) if hi <= lo else (g - lo) / (hi - lo) * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    """Read back a P5 file written by :func:`write_pgm`."""
    with open(path, "rb") as fh:
        magic, dims, maxval, pixels = fh.read().split(b"\n", 3)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: expected an 8-bit binary PGM")
    w, h = (int(x) for x in dims.split())
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)
