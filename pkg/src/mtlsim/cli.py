"""Command-line entry point.

    mtlsim overlap  [--config F] [--out D] [--seed N] [--quick] [--workers N]
    mtlsim regimen  ...
    mtlsim meta     ... [--skip-selftest]
    mtlsim selftest [--quick]
    mtlsim gradcheck [--nets N] [--fault-inject]

Exit status: 0 success, 1 configuration error, 2 self-test or numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import ExperimentConfig, apply_quick, validate
from .network import ConfigurationError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file, or a manifest.json to rerun")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="environment seed (non-negative)")
    common.add_argument("--quick", action="store_true", help="desk-scale sizes")
    common.add_argument("--workers", type=int, help="worker processes")

    p = argparse.ArgumentParser(prog="mtlsim", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("overlap", parents=[common], help="fixed-overlap sweep")
    sub.add_parser("regimen", parents=[common], help="single/multitask training-mix sweep")
    m = sub.add_parser("meta", parents=[common], help="meta-learner cost sweep")
    m.add_argument("--skip-selftest", action="store_true", help="run without a passing self-test marker")
    sub.add_parser("selftest", parents=[common], help="gradient, SVGD, bandit and cost-model checks")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--nets", type=int, default=20)
    g.add_argument("--fault-inject", action="store_true", help="corrupt the analytic gradient (must fail)")
    return p


def build_config(args) -> ExperimentConfig:
    from .harness import load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.quick:
        apply_quick(cfg)
    if args.command in ("overlap", "regimen", "meta"):
        cfg.run.experiment = args.command
    if args.out:
        cfg.run.out = args.out
    if args.seed is not None:
        cfg.env.seed = args.seed
    if args.workers is not None:
        cfg.run.workers = args.workers
    if getattr(args, "skip_selftest", False):
        cfg.run.skip_selftest = True
    validate(cfg)
    return cfg


def _selftest(args) -> int:
    from .selftest import run_selftests, write_marker

    results = run_selftests(quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.1f}s)")
    if all(r.passed for r in results):
        print(f"marker written to {write_marker(results)}")
        return EXIT_OK
    return EXIT_FAILURE


def _gradcheck(args) -> int:
    from .gradcheck import run_gradient_checks
    from .selftest import GRAD_TOLERANCE

    seed = args.seed if args.seed is not None else 0
    results = run_gradient_checks(args.nets, seed, corrupt=1e-3 if args.fault_inject else 0.0)
    worst = max(results, key=lambda r: r.max_rel_error)
    for i, r in enumerate(results):
        print(f"net {i}: max rel error {r.max_rel_error:.2e} ({r.checked} entries, {r.skipped_kinks} kinks skipped)")
    ok = worst.max_rel_error < GRAD_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst.max_rel_error:.2e} at {worst.worst_param}")
    return EXIT_OK if ok else EXIT_FAILURE


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be non-negative")
        if args.command == "selftest":
            return _selftest(args)
        if args.command == "gradcheck":
            return _gradcheck(args)
        cfg = build_config(args)
        from .harness import run_experiment
        from .selftest import has_marker, marker_path

        if args.command == "meta" and not cfg.run.skip_selftest and not has_marker():
            print(
                f"no passing self-test for this build ({marker_path()}); run 'mtlsim selftest' "
                "or pass --skip-selftest",
                file=sys.stderr,
            )
            return EXIT_FAILURE
        run_experiment(cfg, cfg.run.out, selftest_skipped=cfg.run.skip_selftest)
        print(f"results in {cfg.run.out}")
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
