"""Command-line entry: run / sweep / plot / compare / pretrain / gen-demos."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, resolve_config
from .harness import cmd_compare, cmd_gen_demos, cmd_plot, cmd_pretrain, cmd_run, cmd_sweep


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat JSON config file")
    p.add_argument("--env", help="environment name (pointmass, reacher2goal)")
    p.add_argument("--method", help="dppo | dawr | dipo | dql | idql | qsm")
    p.add_argument("--optimizer", help="adamw | adapg | rmsprop | sgd")
    p.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    p.add_argument("--omega", type=float, help="iterate-averaging weight in (0, 1.5]")
    p.add_argument("--eps-opt", type=float, dest="eps_opt",
                   help="optimizer denominator epsilon")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--full-chain-grad", action="store_true", default=None,
                   dest="full_chain_grad",
                   help="differentiate through every denoise step in dql")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (repeatable)")


def _overrides(args: argparse.Namespace) -> dict:
    keys = ("env", "method", "optimizer", "seeds", "omega", "eps_opt", "out",
            "full_chain_grad")
    over = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        over[key.strip()] = value
    return over


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpol",
        description="Desk-scale diffusion-policy fine-tuning lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in (
        ("run", "pretrain then fine-tune over the configured seeds"),
        ("pretrain", "generate demos and behavior-clone a policy"),
        ("gen-demos", "write a scripted-expert demonstration dataset"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_config_flags(p)

    p = sub.add_parser("sweep", help="run a config sweep and summarize finals")
    _add_config_flags(p)
    p.add_argument("--param", required=True, help="config field to sweep")
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.6,0.8,1.0,1.2,1.5")

    p = sub.add_parser("plot", help="aggregate seed curves and emit SVG plots")
    p.add_argument("run_dirs", nargs="+", help="run directories (each with seed*/)")
    p.add_argument("--out", default="plots", help="directory for the SVG files")

    p = sub.add_parser("compare", help="adamw-vs-adapg verdict table per method")
    p.add_argument("--env", required=True)
    p.add_argument("--methods", default="dppo,dawr,dipo,dql,idql,qsm")
    p.add_argument("--root", default="runs", help="directory holding the run dirs")
    p.add_argument("--out", default=None, help="output CSV path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args.run_dirs, args.out)
        if args.command == "compare":
            methods = [m for m in args.methods.replace(" ", "").split(",") if m]
            return cmd_compare(methods, args.env, args.root, args.out)

        cfg = resolve_config(args.config, _overrides(args))
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "gen-demos":
            return cmd_gen_demos(cfg)
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v]
            return cmd_sweep(cfg, args.param, values)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
