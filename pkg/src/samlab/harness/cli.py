"""Command-line entry point.

Exit codes: 0 on success, 1 on configuration/usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..convergence import FUNCTIONS, ConvergenceConfig, run_convergence_check
from ..perturb import Scope, scope_mask, sparsity_report
from ..sharpness import SharpnessConfig, adaptive_sharpness
from .checkpoint import checkpoint_load
from .config import ConfigError, load_config, parse_config
from .data import load_dataset
from .export import export_param_histograms
from .train import train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _dataset_of(ck):
    if not ck.run_config:
        raise ConfigError("checkpoint carries no run config, cannot locate its dataset")
    cfg = parse_config(ck.run_config)
    train_set, _ = load_dataset(cfg.data)
    return cfg, train_set


def cmd_train(args):
    cfg = load_config(args.config)
    out = train(cfg, out_dir=args.out, resume_from=args.resume, until_epoch=args.until_epoch)
    print(out)


def cmd_sharpness(args):
    ck = checkpoint_load(args.checkpoint)
    _, train_set = _dataset_of(ck)
    scfg = SharpnessConfig(rho=args.rho, m=args.m, subset_size=args.subset, steps=args.steps,
                           seed=args.seed)
    try:
        scfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = adaptive_sharpness(ck.model, (train_set.X, train_set.y), scfg)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(f"s_w_m={report.s_w_m:.6g}")


def cmd_converge(args):
    if args.fn not in FUNCTIONS:
        raise ConfigError(f"unknown function {args.fn!r}")
    cfg = ConvergenceConfig(test_fn=args.fn, h=args.h, rho=args.rho, T=args.T,
                            noise=args.noise_seed, norm_coords=args.norm_coords,
                            lam=args.lam, dim=args.dim, fn_seed=args.seed)
    try:
        report = run_convergence_check(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(f"lhs={report.lhs:.6g} rhs={report.rhs:.6g} ratio={report.ratio:.6g}")


def cmd_inspect_masks(args):
    try:
        scope = Scope.parse(args.scope)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ck = checkpoint_load(args.checkpoint)
    model = ck.model
    grads = None
    if scope.kind == "fisher_topk":
        cfg, train_set = _dataset_of(ck)
        _, grads = model.loss_grad(train_set.X, train_set.y, smoothing=cfg.label_smoothing,
                                   update_stats=False)
    mask = scope_mask(scope, model.registry, grads, model.num_params)
    print(json.dumps(sparsity_report(mask, model.registry), indent=2, sort_keys=True))


def cmd_export_hist(args):
    ck = checkpoint_load(args.checkpoint)
    try:
        rows = export_param_histograms(ck, args.bins, args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"{len(rows)} rows -> {args.out}")


def build_parser():
    p = _Parser(prog="samlab", description="Sharpness-aware minimization laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run an experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--until-epoch", type=int, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sharpness", help="adaptive l-inf m-sharpness of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--steps", type=int, choices=[1, 20], default=20)
    s.add_argument("--m", type=int, default=128)
    s.add_argument("--subset", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sharpness)

    c = sub.add_parser("converge", help="check the SAM-ON convergence bound")
    c.add_argument("--fn", required=True, choices=list(FUNCTIONS))
    c.add_argument("--h", type=float, required=True)
    c.add_argument("--rho", type=float, required=True)
    c.add_argument("--T", type=int, required=True)
    c.add_argument("--norm-coords", default="all")
    c.add_argument("--noise-seed", type=int, default=None)
    c.add_argument("--lam", type=float, default=1.0)
    c.add_argument("--dim", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_converge)

    i = sub.add_parser("inspect", help="inspect a checkpoint")
    isub = i.add_subparsers(dest="what", required=True, parser_class=_Parser)
    im = isub.add_parser("masks", help="print the sparsity report of a scope mask")
    im.add_argument("--checkpoint", required=True)
    im.add_argument("--scope", required=True)
    im.set_defaults(func=cmd_inspect_masks)

    e = sub.add_parser("export", help="export checkpoint statistics")
    esub = e.add_subparsers(dest="what", required=True, parser_class=_Parser)
    eh = esub.add_parser("hist", help="|w| histograms per parameter tag")
    eh.add_argument("--checkpoint", required=True)
    eh.add_argument("--bins", type=int, required=True)
    eh.add_argument("--out", required=True)
    eh.set_defaults(func=cmd_export_hist)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
