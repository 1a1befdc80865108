"""Command-line interface.

Subcommands: run (one experiment), ablate (toggle suite over shared seeds),
baseline (reference runs), verify (self-check suite). Any --section.key value
pair overrides the corresponding config field; values parse as JSON when
possible. FEDPROMPT_OUTPUT_ROOT relocates default output directories.
"""

import argparse
import os
import sys

from .config import ExperimentConfig, parse_override_value
from .errors import ConfigError, TrainingDivergenceError
from .experiment import BASELINE_KINDS, run_ablation_suite, run_baseline, run_experiment
from .verify import run_verify

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 4


def _collect_overrides(extras):
    """Turn leftover CLI tokens (--key value or --key=value) into a dict."""
    overrides = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        token = token[2:]
        if "=" in token:
            key, value = token.split("=", 1)
            i += 1
        else:
            key = token
            if i + 1 >= len(extras):
                raise ConfigError(f"override {key!r} is missing a value")
            value = extras[i + 1]
            i += 2
        overrides[key] = parse_override_value(value)
    return overrides


def _load_config(args, extras):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = _collect_overrides(extras)
    if getattr(args, "no_sort", False):
        overrides["ablations.sort"] = False
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def _output_dir(args, cfg, label):
    if args.output:
        return args.output
    root = os.environ.get("FEDPROMPT_OUTPUT_ROOT", "runs")
    return os.path.join(root, f"{label}-{cfg.config_hash()[:8]}-seed{cfg.seed}")


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file (defaults are the desk fixture)")
    parser.add_argument("--output", help="artifact directory (default under FEDPROMPT_OUTPUT_ROOT)")
    parser.add_argument("--workers", type=int, default=1, help="parallel local updates per round")
    parser.add_argument("--no-sort", action="store_true", help="disable frequency sorting")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedprompt",
        description="Federated class-incremental prompt learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    _add_common(run_p)

    ablate_p = sub.add_parser("ablate", help="run the toggle-ablation suite")
    _add_common(ablate_p)
    ablate_p.add_argument("--seeds", type=int, default=5, help="number of shared seeds")

    base_p = sub.add_parser("baseline", help="run a reference baseline")
    _add_common(base_p)
    base_p.add_argument("--kind", required=True, choices=BASELINE_KINDS)

    verify_p = sub.add_parser("verify", help="run the self-check suite")
    verify_p.add_argument("--full", action="store_true", help="full trial counts (slow)")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        if args.command == "verify":
            if extras:
                raise ConfigError(f"unexpected arguments: {extras}")
            _, ok = run_verify(full=args.full)
            return EXIT_OK if ok else EXIT_CHECK_FAILED

        cfg = _load_config(args, extras)
        if args.command == "run":
            out = _output_dir(args, cfg, "run")
            result = run_experiment(cfg, output_dir=out, workers=args.workers)
            print(f"wrote {out}")
            print(
                f"final average accuracy {result.final_average:.4f}, "
                f"overall {result.matrix.overall_average():.4f}, "
                f"forgetting gap {result.matrix.forgetting_gap():.4f}"
            )
        elif args.command == "ablate":
            out = _output_dir(args, cfg, "ablate")
            stats = run_ablation_suite(
                cfg, seeds=list(range(args.seeds)), output_dir=out, workers=args.workers
            )
            print(f"wrote {out}")
            for name, s in stats.items():
                print(
                    f"{name:>20}: mean final {s['mean_final_average']:.4f}, "
                    f"mean overall {s['mean_overall_average']:.4f}"
                )
        elif args.command == "baseline":
            out = _output_dir(args, cfg, f"baseline-{args.kind}")
            result = run_baseline(cfg, args.kind, output_dir=out, workers=args.workers)
            print(f"wrote {out}")
            if args.kind == "fedavg-finetune":
                print(f"final average accuracy {result.final_average:.4f}")
            else:
                print(f"final average accuracy {result['final_average']:.4f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc} (partial transcript flushed)", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
