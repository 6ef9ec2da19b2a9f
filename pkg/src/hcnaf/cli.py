"""Command-line front end: train, eval, density, sample, gradcheck, and
paramcount over reproducible flat-text configs.

Exit codes: 0 success, 1 usage or malformed-input error, 2 numeric failure,
3 gradient check above tolerance. Every command is deterministic given its
config and seed; re-runs produce byte-identical artifacts. HCNAF_THREADS caps
the worker count used for grid evaluation.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import FormatError, NumericError, RangeError, SaturationError
from .experiments import drivers, pom
from .experiments.grids import density_grid, grid_to_csv, grid_to_pgm
from .hypernet import param_counts
from .training import grad_check, load_checkpoint, save_checkpoint, train

CONFIG_MAGIC = "hcnaf-config v1"


class UsageError(Exception):
    pass


def parse_config_text(text):
    """Flat `key = value` lines under a version line; # starts a comment."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_MAGIC:
        raise FormatError(f"config must start with {CONFIG_MAGIC!r}")
    out = {}
    for ln, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, eq, value = stripped.partition("=")
        if not eq:
            raise FormatError(f"line {ln}: expected `key = value`")
        out[key.strip()] = value.strip()
    return out


def render_config(cfg):
    body = "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
    return CONFIG_MAGIC + "\n" + body


def load_config(path):
    with open(path, "r", encoding="ascii") as fh:
        overrides = parse_config_text(fh.read())
    experiment = overrides.get("experiment")
    if experiment is None:
        raise UsageError("config must set `experiment`")
    resolved = drivers.default_config(experiment)
    allowed = set(resolved) | {"out_dir"}
    unknown = set(overrides) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved.update(overrides)
    return resolved


def worker_count():
    raw = os.environ.get("HCNAF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parse_condition(spec_text, model_cond_dim):
    """A comma list of floats, or pom:SCENARIO:DT for the forecasting demo's
    canonical context."""
    if spec_text.startswith("pom:"):
        _, scenario, dt = spec_text.split(":")
        return pom.condition_vector(pom.canonical_scene(int(scenario), float(dt)))
    values = np.array([float(v) for v in spec_text.split(",")])
    if values.shape[0] != model_cond_dim:
        raise UsageError(f"condition needs {model_cond_dim} values, got {values.shape[0]}")
    return values


def _print_report(pairs):
    for key, value in pairs.items():
        if isinstance(value, float):
            print(f"{key}={value:.10g}")
        else:
            print(f"{key}={value}")


def _prepare_out_dir(out_dir, force):
    os.makedirs(out_dir, exist_ok=True)
    if os.listdir(out_dir) and not force:
        raise UsageError(f"output directory {out_dir!r} is not empty (use --force)")


def cmd_train(args):
    cfg = load_config(args.config)
    out_dir = args.out or cfg.get("out_dir")
    if not out_dir:
        raise UsageError("set out_dir in the config or pass --out")
    cfg["out_dir"] = out_dir
    _prepare_out_dir(out_dir, args.force)
    dataset = drivers.build_dataset(cfg)
    model = drivers.build_model(cfg)
    result = train(model, dataset, drivers.train_config(cfg))
    echo = dict(model.config_echo())
    for key in cfg:
        if key.startswith(("experiment", "data.", "eval.", "train.")):
            echo[key] = cfg[key]
    save_checkpoint(os.path.join(out_dir, "checkpoint.hcnaf"), model.parameters(), echo)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="ascii") as fh:
        fh.write("iter,train_nll,val_nll,lr\n")
        for it, train_nll, val_nll, lr in result.history:
            fh.write(f"{it},{train_nll:.10g},{val_nll:.10g},{lr:.10g}\n")
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="ascii") as fh:
        fh.write(render_config(cfg))
    _print_report({"best_val_nll": result.best_val, "best_iter": result.best_iter, "out_dir": out_dir})
    return 0


def _load_model(checkpoint_path):
    params, echo = load_checkpoint(checkpoint_path)
    model = drivers.rebuild_model(echo)
    model.set_parameters(params)
    return model, echo


def cmd_eval(args):
    model, echo = _load_model(args.checkpoint)
    if args.n is not None:
        echo["eval.n"] = str(args.n)
    if args.seed is not None:
        echo["eval.seed"] = str(args.seed)
    report = drivers.evaluate(model, echo)
    _print_report(report)
    return 0


def cmd_density(args):
    model, echo = _load_model(args.checkpoint)
    cond = _parse_condition(args.condition, int(echo["hyper.cond_dim"]))
    bounds = tuple(float(v) for v in args.bounds.split(","))
    if len(bounds) != 4:
        raise UsageError("--bounds needs x0,x1,y0,y1")
    grid = density_grid(model, cond, bounds, args.res, workers=worker_count())
    if args.format == "csv":
        payload = grid_to_csv(grid).encode("ascii")
    else:
        payload = grid_to_pgm(grid)
    with open(args.out, "wb") as fh:
        fh.write(payload)
    _print_report({"out": args.out, "riemann_sum": grid.riemann_sum()})
    return 0


def cmd_sample(args):
    model, echo = _load_model(args.checkpoint)
    cond = _parse_condition(args.condition, int(echo["hyper.cond_dim"]))
    result = model.sample_for_condition(args.n, cond, args.seed)
    dim = result.x.shape[1]
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(",".join(f"x{d}" for d in range(dim)) + ",log_prob\n")
        for row, lp in zip(result.x, result.log_prob):
            fh.write(",".join(f"{v:.10g}" for v in row) + f",{lp:.10g}\n")
    _print_report({"out": args.out, "n": result.x.shape[0], "n_rejected": result.n_rejected})
    return 0


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    cfg["data.n_train"] = str(args.n)
    dataset = drivers.build_dataset(cfg)
    model = drivers.build_model(cfg)
    batch = dataset.subset(np.arange(min(len(dataset), args.batch)))
    tol = args.tolerance if args.tolerance is not None else (1e-2 if cfg["train.precision"] == "32" else 1e-4)
    err = grad_check(model, batch, fraction=args.fraction, seed=int(cfg["train.seed"]))
    _print_report({"max_rel_err": err, "tolerance": tol})
    return 0 if err < tol else 3


def cmd_paramcount(args):
    cfg = load_config(args.config)
    model = drivers.build_model(cfg)
    if model.kind != "hcnaf":
        raise UsageError("paramcount applies to the hcnaf model kind")
    counts = param_counts(model.af, model.cfg)
    _print_report(counts)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="hcnaf", description="conditional-flow density estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with its experiment's metrics")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("density", help="evaluate the conditional density on a lattice")
    p.add_argument("checkpoint")
    p.add_argument("--condition", required=True)
    p.add_argument("--bounds", required=True, help="x0,x1,y0,y1")
    p.add_argument("--res", type=int, required=True)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_density)

    p = sub.add_parser("sample", help="draw conditioned samples with exact log-densities")
    p.add_argument("checkpoint")
    p.add_argument("--condition", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    p.add_argument("config")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("paramcount", help="parameter accounting for a configuration")
    p.add_argument("config")
    p.set_defaults(fn=cmd_paramcount)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, RangeError, SaturationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
