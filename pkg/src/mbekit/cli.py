"""Command-line surface.

Subcommands: gen-data, train, grad-scan, conflict-suite, report, bounds.
Exit codes: 0 success, 2 config/usage error, 3 run aborted on a non-finite
loss.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import ArithmeticSpec, gen_multiplication_data, write_splits
from .entropy import (
    BoundInputs,
    MbeConfig,
    beta_for_distribution,
    generalization_gap_bound,
    min_prob_entropy_bound,
    shannon_entropy,
    spectrum_report,
)
from .errors import ConfigError, NonFiniteLossError
from .experiments import comparison_report, grad_scan, run_conflict_suite
from .training import load_config, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _floats(text):
    return [float(x) for x in text.split(",") if x]


def _add_config_args(sub):
    sub.add_argument("--config", required=True, help="JSON run config")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override any config field")


def _cmd_gen_data(args):
    spec_raw = json.loads(Path(args.spec).read_text())
    kind = spec_raw.pop("kind", "arithmetic")
    out = Path(args.out)
    if kind == "arithmetic":
        if "train_digit_range" in spec_raw:
            spec_raw["train_digit_range"] = tuple(spec_raw["train_digit_range"])
        if "ood_digit_range" in spec_raw:
            spec_raw["ood_digit_range"] = tuple(spec_raw["ood_digit_range"])
        try:
            spec = ArithmeticSpec(**spec_raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid arithmetic spec: {exc}") from exc
        splits = gen_multiplication_data(spec)
        write_splits(splits, out)
        print(f"wrote {splits.manifest['counts']} to {out}")
        return EXIT_OK
    raise ConfigError(f"unknown data kind {kind!r}")


def _cmd_train(args):
    config = load_config(args.config, args.overrides)
    log = train(config)
    print(json.dumps({k: v for k, v in log.summary.items() if k != "config"},
                     indent=2, default=str))
    if config.output_dir:
        print(f"run dir: {config.output_dir}")
    return EXIT_OK


def _cmd_grad_scan(args):
    config = load_config(args.config, args.overrides)
    result = grad_scan(config, k_batches=args.k_batches, stride=args.stride)
    for group in sorted(result.oscillation):
        s = result.oscillation[group]
        print(f"{group.label():>14}  std={s.std:.4f}  zcr={s.zero_crossing_rate:.4f}  "
              f"psd_peak_to_mean={s.psd_peak_to_mean:.2f}")
    return EXIT_OK


def _cmd_conflict_suite(args):
    config = load_config(args.config, args.overrides)
    result = run_conflict_suite(config)
    header = f"{'strategy':<12}{'L1(pos)':>9}{'L1(neg)':>9}{'MBE(pos)':>10}{'MBE(neg)':>10}{'dist':>8}{'sep':>8}"
    print(header)
    for r in result.rows:
        print(f"{r.strategy:<12}{r.l1_pos:>9.3f}{r.l1_neg:>9.3f}{r.mbe_pos:>10.4f}"
              f"{r.mbe_neg:>10.4f}{r.distance:>8.2f}{r.separation_ratio:>8.2f}")
    return EXIT_OK


def _cmd_report(args):
    def load(path):
        try:
            return json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read summary {path}: {exc}") from exc

    report = comparison_report(load(args.base), load(args.new))
    print(report.render())
    if args.csv:
        report.write_csv(args.csv)
    return EXIT_OK


def _read_matrix(source):
    if source == "-":
        return np.loadtxt(sys.stdin)
    return np.loadtxt(source)


def _cmd_bounds(args):
    if args.calculator == "shannon":
        print(f"{shannon_entropy(_floats(args.p)):.6f} bits")
    elif args.calculator == "beta":
        print(f"beta = {beta_for_distribution(_floats(args.p)):.6f}")
    elif args.calculator == "min-prob":
        bound = min_prob_entropy_bound(args.n, args.alpha_min)
        print(f"exact_bound  = {bound.exact_bound:.6f} bits")
        print(f"approx_bound = {bound.approx_bound:.6f} bits")
    elif args.calculator == "gen-gap":
        inputs = BoundInputs(n_samples=args.n_samples,
                             h_per_layer=tuple(_floats(args.h)),
                             alpha_exponent=args.alpha)
        print(f"{generalization_gap_bound(inputs):.6f}")
    elif args.calculator == "mbe":
        matrix = np.atleast_2d(_read_matrix(args.matrix))
        config = MbeConfig(alpha=args.alpha, normalize=not args.raw)
        report = spectrum_report(matrix, config)
        value = report.mbe_normalized if not args.raw else report.mbe_value
        print(f"mbe = {value:.6f}" + ("" if args.raw else " (normalized)"))
        print(f"raw = {report.mbe_value:.6f} nats, {report.mbe_value_bits:.6f} bits")
    else:
        raise ConfigError(f"unknown calculator {args.calculator!r}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mbekit",
        description="Entropy-gated training toolkit: experiments, diagnostics, bounds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset from a task spec")
    p.add_argument("--spec", required=True, help="JSON task spec")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training experiment")
    _add_config_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("grad-scan", help="train while scanning gradient alignment")
    _add_config_args(p)
    p.add_argument("--k-batches", type=int, default=1)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=_cmd_grad_scan)

    p = sub.add_parser("conflict-suite", help="run all conflicting-memory strategies")
    _add_config_args(p)
    p.set_defaults(func=_cmd_conflict_suite)

    p = sub.add_parser("report", help="compare two run summaries")
    p.add_argument("base", help="baseline summary.json")
    p.add_argument("new", help="treatment summary.json")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("bounds", help="entropy and generalization bound calculators")
    bsub = p.add_subparsers(dest="calculator", required=True)
    b = bsub.add_parser("shannon")
    b.add_argument("--p", required=True, help="comma-separated probabilities")
    b = bsub.add_parser("beta")
    b.add_argument("--p", required=True)
    b = bsub.add_parser("min-prob")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--alpha-min", type=float, required=True)
    b = bsub.add_parser("gen-gap")
    b.add_argument("--n-samples", type=int, required=True)
    b.add_argument("--h", required=True, help="comma-separated per-layer entropies (bits)")
    b.add_argument("--alpha", type=float, default=1.0)
    b = bsub.add_parser("mbe")
    b.add_argument("--matrix", required=True, help="whitespace matrix file, or - for stdin")
    b.add_argument("--alpha", type=float, default=2.0)
    b.add_argument("--raw", action="store_true", help="report raw nats, not normalized")
    p.set_defaults(func=_cmd_bounds)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
