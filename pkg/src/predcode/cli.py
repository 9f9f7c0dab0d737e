"""Command-line entry point: ``predcode <subcommand> --config PATH``."""

from __future__ import annotations

import argparse
import sys
import warnings

from . import __version__
from .config import ExperimentConfig, load_config, load_preset, preset_names
from .errors import AuditError, ConfigError, DivergenceError, UsageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_AUDIT = 4
EXIT_USAGE = 5

SUBCOMMANDS = {
    "classify": ("classify",),
    "generate": ("generate",),
    "efficiency": ("efficiency",),
    "bench": ("bench-smm", "bench-wallclock"),
    "calibrate": ("calibrate",),
}

EPILOG = f"""\
exit codes: {EXIT_OK} ok, {EXIT_CONFIG} config error, {EXIT_DIVERGENCE} divergence, \
{EXIT_AUDIT} SMM audit failure, {EXIT_USAGE} usage error

environment:
  PREDCODE_DATA   dataset cache directory (default ~/.cache/predcode); MNIST-layout
                  IDX files live in <cache>/mnist/ and <cache>/fashion_mnist/
  PREDCODE_PURE   set to 1 to force the pure-Python matmul kernels
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="predcode", description="Predictive coding experiments.",
                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"predcode {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "classify": "train classifiers over the algorithm x hyperparameter x seed grid",
        "generate": "energy-vs-iteration traces of generative iPC and PC",
        "efficiency": "training loss against non-parallel matmuls (SMMs)",
        "bench": "SMM audit (bench-smm) or wall-clock ratio sweep (bench-wallclock)",
        "calibrate": "accuracy and AdaECE of saved checkpoints under corruptions",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH", help="experiment YAML file")
        src.add_argument("--preset", metavar="NAME", help="shipped preset (see 'predcode presets')")
        p.add_argument("--out", metavar="DIR", help="output directory (default: config 'output')")
        p.add_argument("--seed", type=int, metavar="N", help="run this single seed instead of the config's list")
        p.add_argument("--engine", choices=("serial", "parallel"), help="execution engine")
        p.add_argument("--workers", type=int, metavar="N", help="worker threads for the parallel engine")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan, run nothing")
    sub.add_parser("presets", help="list shipped presets")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_preset(args.preset) if args.preset else load_config(args.config)
    allowed = SUBCOMMANDS[args.command]
    if cfg.experiment not in allowed:
        raise ConfigError(f"config describes a {cfg.experiment!r} experiment; "
                          f"'{args.command}' runs {' / '.join(allowed)}")
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.engine is not None:
        changes["engine"] = args.engine
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        changes["workers"] = args.workers
    if args.out is not None:
        changes["output"] = args.out
    return cfg.model_copy(update=changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name in preset_names():
            print(name)
        return EXIT_OK
    # deferred: keeps --help and config errors fast
    from .experiments import plan, run

    try:
        cfg = resolve_config(args)
        if args.dry_run:
            print("\n".join(plan(cfg)))
            return EXIT_OK
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            lines = run(cfg, cfg.output)
        print("\n".join(lines))
        print(f"artifacts in {cfg.output}")
        return EXIT_OK
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except DivergenceError as exc:
        return _fail(exc, EXIT_DIVERGENCE)
    except AuditError as exc:
        return _fail(exc, EXIT_AUDIT)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def _fail(exc, code: int) -> int:
    kind = {EXIT_CONFIG: "config error", EXIT_DIVERGENCE: "divergence",
            EXIT_AUDIT: "audit failure", EXIT_USAGE: "usage error"}[code]
    print(f"predcode: {kind}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
