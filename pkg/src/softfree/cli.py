"""Command-line entry point: ``softfree <command> [options]``.

Commands write CSV/JSON/PGM files and print the paths they wrote.  Global
options (``--config``, ``--seed``, ``--out``, ``--force``, ``--no-time``)
may appear before or after the command name.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import bench
from .errors import DomainError, NumericError, ShapeError, UsageError
from .model import ToyModel, make_synthetic_task, train

DEFAULT_OUT = {
    "bench-scaling": "bench_scaling.csv",
    "bench-pinv": "bench_pinv.csv",
    "ablate": "ablate.csv",
    "heatmap": "heatmap",
    "train-toy": "train_report.json",
}


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _global_options(suppress):
    p = argparse.ArgumentParser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="FILE", help="JSON run configuration", **kw)
    p.add_argument("--seed", type=int, help="override the configured seed", **kw)
    p.add_argument("--out", metavar="PATH", help="output file (heatmap: file prefix)", **kw)
    p.add_argument("--force", action="store_true", help="allow exact attention above n=8192", **kw)
    p.add_argument("--no-time", action="store_true", help="write 0 in timing columns (reproducible files)", **kw)
    return p


def build_parser():
    parser = argparse.ArgumentParser(
        prog="softfree",
        description="Softmax-free attention benchmarks and toy training.",
        parents=[_global_options(suppress=False)],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = [_global_options(suppress=True)]

    p = sub.add_parser("bench-scaling", parents=common, help="time and peak memory versus sequence length")
    p.add_argument("--n-list", type=_int_list, help="ascending sequence lengths, e.g. 1024,2048")
    p.add_argument("--m", type=int, help="number of landmarks")
    p.add_argument("--d-e", type=int, help="embedding width")
    p.add_argument("--mechanisms", type=_str_list, help="subset of soft,exact_gaussian,softmax_exact")
    p.add_argument("--repeats", type=int, help="timed repeats after one warm-up (>= 3)")

    p = sub.add_parser("bench-pinv", parents=common, help="Newton pseudoinverse residual traces")
    p.add_argument("--m-list", type=_int_list, help="landmark counts, e.g. 8,49")
    p.add_argument("--trials", type=int, help="random Gram matrices per m")
    p.add_argument("--max-iters", type=int, help="Newton iterations")

    p = sub.add_parser("ablate", parents=common, help="train once per bottleneck size or sampling method")
    p.add_argument("--axis", choices=("bottleneck", "sampling"))
    p.add_argument("--values", type=_str_list, help="comma-separated m values or sampler names")
    p.add_argument("--epochs", type=int)
    p.add_argument("--placement", choices=("random", "last"), help="where signal tokens sit")

    p = sub.add_parser("heatmap", parents=common, help="query-row heatmaps of reconstructed and exact attention")
    p.add_argument("tokens", nargs="?", help="n x d token CSV; a smooth random field is used if omitted")
    p.add_argument("--query-index", type=int)

    p = sub.add_parser("train-toy", parents=common, help="train the toy classifier, write a JSON report")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--save-params", metavar="FILE", help="also write trained parameters (binary)")
    return parser


def _replace(section, **changes):
    return dataclasses.replace(section, **{k: v for k, v in changes.items() if v is not None})


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_bench_scaling(args, cfg):
    sec = _replace(cfg.scaling, n_list=args.n_list, m=args.m, d_e=args.d_e,
                   mechanisms=args.mechanisms, repeats=args.repeats)
    rows = bench.run_scaling(sec, cfg.newton, cfg.seed, force=args.force, timing=not args.no_time)
    bench.write_csv(args.out, bench.SCALING_HEADER, rows)
    return [args.out]


def cmd_bench_pinv(args, cfg):
    sec = _replace(cfg.pinv, m_list=args.m_list, trials=args.trials)
    newton = _replace(cfg.newton, max_iters=args.max_iters)
    rows = bench.run_pinv(sec, newton, cfg.seed)
    bench.write_csv(args.out, bench.PINV_HEADER, rows)
    return [args.out]


def cmd_ablate(args, cfg):
    cfg.train = _replace(cfg.train, epochs=args.epochs, placement=args.placement)
    rows = bench.run_ablation(
        cfg, axis=args.axis, values=args.values, timing=not args.no_time,
        log=lambda r: _log(f"{r['axis']}={r['value']}: accuracy {r['final_accuracy']:.4f}"),
    )
    bench.write_csv(args.out, bench.ABLATE_HEADER, rows)
    return [args.out]


def cmd_heatmap(args, cfg):
    sec = _replace(cfg.heatmap, query_index=args.query_index)
    if args.tokens:
        tokens = np.loadtxt(args.tokens, delimiter=",", ndmin=2)
    else:
        rng = np.random.default_rng(cfg.seed)
        tokens = bench.smooth_token_field(sec.grid_h, sec.grid_w, sec.d_e, rng, sec.length_scale)
    soft, exact = bench.heatmap_rows(tokens, sec, cfg.newton, cfg.seed)
    written = []
    for tag, grid in (("soft", soft), ("exact", exact)):
        csv_path, pgm_path = f"{args.out}_{tag}.csv", f"{args.out}_{tag}.pgm"
        np.savetxt(csv_path, grid, delimiter=",", fmt="%.17g", newline="\n")
        bench.write_pgm(pgm_path, grid)
        written += [csv_path, pgm_path]
    _log(f"pearson r(soft, exact) = {bench.pearson(soft, exact):.4f}")
    return written


def cmd_train_toy(args, cfg):
    t = _replace(cfg.train, epochs=args.epochs, lr=args.lr)
    mcfg = cfg.model_config()
    task = make_synthetic_task(mcfg, t.samples_per_class, cfg.seed, t.sigma, t.signal_fraction, t.placement)
    model = ToyModel.init(mcfg)
    report = train(model, task, t.epochs, t.lr, cfg.seed, t.batch_size,
                   log=lambda e, loss: _log(f"epoch {e}: loss {loss:.6g}") if e % 10 == 0 else None)
    if args.no_time:
        report.wall_time_s = 0.0
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json(indent=2) + "\n")
    written = [args.out]
    if args.save_params:
        model.save(args.save_params)
        written.append(args.save_params)
    _log(f"test accuracy {report.final_accuracy:.4f}")
    return written


COMMANDS = {
    "bench-scaling": cmd_bench_scaling,
    "bench-pinv": cmd_bench_pinv,
    "ablate": cmd_ablate,
    "heatmap": cmd_heatmap,
    "train-toy": cmd_train_toy,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = DEFAULT_OUT[args.command]
    try:
        cfg = bench.load_run_config(args.config) if args.config else bench.RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        for path in COMMANDS[args.command](args, cfg):
            print(path)
    except bench.ConfigError as exc:
        print(f"softfree: config error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, DomainError, NumericError, UsageError, ValueError, OSError) as exc:
        print(f"softfree: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
