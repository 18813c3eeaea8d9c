"""``lmkan`` command line.

Exit codes: 0 success, 2 bad configuration or arguments, 3 non-finite loss
during training, 4 fusion precondition not met.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from . import kernels
from .bench import run_bench
from .config import load_config
from .cost import block_flops, model_flops, param_count, param_ratio_vs_linear
from .errors import ConfigError, FormatError, FusionError, TrainingDivergedError
from .fusion import fuse_model
from .layers import Linear, PrecondBlock
from .serialization import load_model, save_model
from .training import evaluate_mse, make_teacher, sweep_grid_resolution, train_distill, write_history_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FUSION = 0, 2, 3, 4

log = logging.getLogger("lmkan")


def cmd_train(args):
    cfg, io = load_config(args.config)
    teacher = make_teacher(cfg.teacher)
    res = train_distill(cfg.student, teacher, cfg, log_every=args.log_every)
    model_out = args.model_out or io.model_out
    hist_out = args.history or io.history_csv
    save_model(res.model, model_out, io.dtype)
    write_history_csv(res.history, hist_out)
    print(f"steps={len(res.history)} flops={res.flops} params={res.model.n_params()}")
    print(f"model={model_out} history={hist_out}")
    print(f"final_mse={res.final_mse!r}")
    return EXIT_OK


def cmd_eval(args):
    cfg, _ = load_config(args.config)
    model = load_model(args.model)
    teacher = make_teacher(cfg.teacher)
    n = args.samples or cfg.eval_samples
    seed = cfg.eval_seed if args.seed is None else args.seed
    print(f"mse={evaluate_mse(model, teacher, n, seed)!r}")
    return EXIT_OK


def cmd_fuse(args):
    model = load_model(args.model_in)
    before = model_flops(model)
    try:
        fused, report = fuse_model(model)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FUSION
    save_model(fused, args.model_out)
    print(f"flops_before={before} flops_after={model_flops(fused)}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK if report.complete else EXIT_FUSION


def cmd_bench(args):
    model = load_model(args.model)
    reports = run_bench(model, args.batch_sizes, args.warmup, args.timed, threads=args.threads)
    rows = [r.as_dict() for r in reports]
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        keys = [k for k in rows[0] if k != "run_seconds"]
        w = csv.DictWriter(sys.stdout, keys, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def inspect_rows(model):
    rows = []
    for i, m in enumerate(model.modules):
        if isinstance(m, PrecondBlock):
            rows.append({
                "module": i, "kind": "lmkan", "n_in": m.n_in, "n_out": m.n_out, "G": m.layer.G,
                "gamma": m.gamma, "precond": m.mode, "params": param_count(m.layer),
                "flops": block_flops(m), "param_ratio": param_ratio_vs_linear(m.layer.G),
            })
        elif isinstance(m, Linear):
            rows.append({
                "module": i, "kind": "linear", "n_in": m.n_in, "n_out": m.n_out, "G": None,
                "gamma": None, "precond": None, "params": m.W.size + m.b.size,
                "flops": block_flops(m), "param_ratio": None,
            })
    totals = {"layers": len(rows), "params": model.n_params(), "flops": model_flops(model)}
    return rows, totals


def cmd_inspect(args):
    model = load_model(args.model)
    rows, totals = inspect_rows(model)
    if args.json:
        print(json.dumps({"layers": rows, "totals": totals}, indent=2))
        return EXIT_OK
    head = ("module", "kind", "n_in", "n_out", "G", "gamma", "precond", "params", "flops", "param_ratio")
    print("\t".join(head))
    for r in rows:
        print("\t".join("-" if r[k] is None else str(r[k]) for k in head))
    print(f"total\tlayers={totals['layers']}\tparams={totals['params']}\tflops={totals['flops']}")
    return EXIT_OK


def cmd_sweep(args):
    cfg, _ = load_config(args.config)
    if any(g < 3 for g in args.G):
        raise ConfigError("all grid sizes must be >= 3", field="G")
    rows = sweep_grid_resolution(cfg, args.G)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, ["G", "final_mse", "error"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "final_mse": repr(r["final_mse"])})
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lmkan", description="lookup multivariate KAN layers on CPU")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="distill a teacher into a student")
    t.add_argument("config")
    t.add_argument("--model-out")
    t.add_argument("--history")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MSE of a saved model against the configured teacher")
    e.add_argument("config")
    e.add_argument("model")
    e.add_argument("--samples", type=int)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference throughput")
    b.add_argument("model")
    b.add_argument("--batch-sizes", type=int, nargs="+", default=[256, 4096])
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--timed", type=int, default=20)
    b.add_argument("--threads", type=int)
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fuse", help="absorb branches and batch norms for inference")
    f.add_argument("model_in")
    f.add_argument("model_out")
    f.set_defaults(func=cmd_fuse)

    i = sub.add_parser("inspect", help="per-layer shapes, parameters and FLOPs")
    i.add_argument("model")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("sweep-grid", help="final MSE for several grid sizes")
    s.add_argument("config")
    s.add_argument("--G", type=int, nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    kernels.set_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
