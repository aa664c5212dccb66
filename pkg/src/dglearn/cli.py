"""Command-line entry point: ``dglearn {train,compress-report,check-grad,theory-probe}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (including a
failed numerical check).
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .harness import (EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, check_partition_gradients,
                      compress_report, run)

OUT_ENV = "DGLEARN_OUT"
DEFAULT_OUT = "dglearn-out"


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides through the config parser."""
    if not pairs:
        return cfg
    text = cfg.to_ini()
    extra = []
    for pair in pairs:
        key, sep, value = pair.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        extra.append((section.strip(), name.strip(), value.strip()))
    parser = configparser.ConfigParser()
    parser.read_string(text)
    for section, name, value in extra:
        if not parser.has_section(section):
            raise ConfigError(f"unknown section [{section}] in override")
        parser[section][name] = value
    buf = io.StringIO()
    parser.write(buf)
    return ExperimentConfig.from_ini(buf.getvalue(), "<overrides>")


def cmd_train(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.desk()
        if args.seed is not None:
            cfg.run.seed = args.seed
        cfg = _apply_overrides(cfg, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    print(cfg.to_ini(), end="")
    result = run(cfg, out)
    if result.exit_code != EXIT_OK:
        kind = "config error" if result.exit_code == EXIT_CONFIG else "runtime failure"
        print(f"{kind}: {result.message}", file=sys.stderr)
        return result.exit_code
    s = result.summary
    accs = " ".join(f"{a:.4f}" for a in s["final_test_acc"])
    print(f"final test accuracy per module: {accs}")
    print(f"total bits sent: {s['total_bits']}")
    for row in s.get("compression", []):
        print(f"module {row['module'] + 1}: bandwidth x{row['bandwidth_compression_value']:.3f}, "
              f"buffer x{row['buffer_compression_value']:.3f}")
    print(f"wrote {result.metrics_path}")
    return EXIT_OK


def cmd_compress_report(args) -> int:
    text, csv_text = compress_report(args.atoms, args.memory, args.alpha, args.batch, args.groups)
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return EXIT_OK


def cmd_check_grad(args) -> int:
    errors = check_partition_gradients(args.width, args.modules, args.size, args.batch,
                                       seed=args.seed, max_entries=args.entries)
    for j, e in enumerate(errors):
        print(f"module {j + 1}: max relative error {e:.3e}")
    worst = max(errors)
    ok = worst < args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_theory_probe(args) -> int:
    from .diagnostics import TheoryProbe, check_descent_inequality

    probe = TheoryProbe()
    res = check_descent_inequality(probe, args.steps, args.trajectories, args.seed)
    print(f"G = {res.g_bound:.6f}, L = {probe.smoothness}")
    for t, (m, se) in enumerate(zip(res.margins, res.std_errors)):
        print(f"t={t:3d} margin={m:+.5f} se={se:.5f}")
    print(f"descent inequality: {'holds' if res.passed else 'violated'}")
    print(f"accumulation: {res.accumulation_lhs:.5f} <= {res.accumulation_rhs:.5f}: "
          f"{'holds' if res.accumulation_passed else 'violated'}")
    return EXIT_OK if res.passed and res.accumulation_passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dglearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment from a config file")
    t.add_argument("config", nargs="?", help="INI config (default: built-in desk preset)")
    t.add_argument("--seed", type=int, help="override run.seed")
    t.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress-report", help="tabulate bandwidth and buffer compression")
    c.add_argument("--atoms", type=_int_list, default=[256], help="codebook sizes, e.g. 2,16,256")
    c.add_argument("--memory", type=_int_list, default=[256], help="buffer sizes in samples")
    c.add_argument("--alpha", type=float, default=1.0, help="codebook sync fraction")
    c.add_argument("--batch", type=int, default=128)
    c.add_argument("--groups", type=int, default=32)
    c.add_argument("--csv", help="also write the table as CSV")
    c.set_defaults(func=cmd_compress_report)

    g = sub.add_parser("check-grad", help="finite-difference check of all local losses (64-bit)")
    g.add_argument("--width", type=int, default=4)
    g.add_argument("--modules", type=int, default=4)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--entries", type=int, default=12, help="entries probed per tensor")
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_check_grad)

    th = sub.add_parser("theory-probe", help="Monte-Carlo check of the descent inequality")
    th.add_argument("--steps", type=int, default=30)
    th.add_argument("--trajectories", type=int, default=20_000)
    th.add_argument("--seed", type=int, default=0)
    th.set_defaults(func=cmd_theory_probe)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
