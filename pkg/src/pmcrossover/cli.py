"""Command-line interface: ``fit``, ``simulate``, ``patterns``, ``validate``.

Exit codes: 0 success, 1 input/config error, 2 fit did not converge.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .estimation import FitOptions, RankDeficient, SingularSubcovariance, fit
from .inference import delta_variance
from .patterns import GroupingScheme, pattern_table
from .simulate import InvalidScenario, run_calibration, simulate_dataset

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2

log = logging.getLogger("pmcrossover")


def _contrast(text: str):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"contrast must be 4 comma-separated numbers, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("contrast needs exactly 4 values")
    return vals


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmcrossover", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log optimizer trace to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration; flags override it")
        sp.add_argument("--method", choices=("ml", "reml"), type=str.lower)
        sp.add_argument("--grouping", help="default | merged-dp | path to TOML grouping file")
        sp.add_argument("--contrast", type=_contrast, help="a,b,c,d over (1A,1B,2A,2B)")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")
        sp.add_argument("--threads", type=int)

    f = sub.add_parser("fit", help="fit the pattern-mixture model to a CSV file")
    common(f)
    f.add_argument("--input", help="wide CSV: pair_id,sequence,y_1A,y_1B,y_2A,y_2B")
    f.add_argument("--naive", action="store_true", default=None, help="single-group, pattern-ignoring fit")

    s = sub.add_parser("simulate", help="Monte Carlo calibration under a known scenario")
    common(s)
    s.add_argument("--scenario", help="preset name (barge-like, non-ignorable); [scenario] in --config wins otherwise")
    s.add_argument("--seed", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--n-pairs", type=int)
    s.add_argument("--dataset-out", help="also write replicate 0 as CSV")

    pt = sub.add_parser("patterns", help="print the 15-pattern taxonomy")
    pt.add_argument("--grouping", default="default")
    pt.add_argument("--json", action="store_true")

    v = sub.add_parser("validate", help="check a CSV file and report pattern counts")
    v.add_argument("--input", required=True)
    v.add_argument("--grouping", default="default")
    v.add_argument("--out")
    return p


def cmd_patterns(args) -> int:
    rows = pattern_table(io.load_grouping(args.grouping))
    if args.json:
        sys.stdout.write(io.dumps(rows))
        return EXIT_OK
    print(f"{'pattern':>7} {'seq':>3}  {'S1P1 S1P2 S2P1 S2P2':<19}  {'1A 1B 2A 2B':<11}  {'monotone':<8}  group")
    for r in rows:
        per = "    ".join(r["period_mask"])
        pos = "  ".join(r["position_mask"])
        print(f"{r['pattern']:>7} {r['sequence']:>3}  {per:<19}  {pos:<11}  {str(r['monotone']).lower():<8}  {r['group']}")
    return EXIT_OK


def cmd_validate(args) -> int:
    ds = io.parse_csv(args.input)
    scheme = io.load_grouping(args.grouping)
    from .patterns import tabulate

    counts = tabulate(ds.records, scheme)
    report = {
        "data": ds.provenance(),
        "pattern_counts": {str(p): n for p, n in counts.by_pattern().items()},
        "by_group": counts.by_group,
        "total": counts.total,
    }
    _emit(io.dumps(report), args.out)
    for r in ds.rejected:
        print(f"line {r['line']}: {r['reason']}", file=sys.stderr)
    return EXIT_OK if ds.n_malformed == 0 and ds.records else EXIT_INPUT


def cmd_fit(args) -> int:
    cfg = io.load_config(
        args.config,
        method=args.method,
        grouping=args.grouping,
        naive=args.naive,
        contrast=args.contrast,
        input=args.input,
        out=args.out,
        threads=args.threads,
    )
    if not cfg.input:
        raise io.ConfigError("no input file (use --input or 'input' in the config)")
    ds = io.parse_csv(cfg.input)
    for r in ds.rejected:
        print(f"line {r['line']}: {r['reason']}", file=sys.stderr)
    if ds.n_malformed:
        raise io.ConfigError(f"{ds.n_malformed} malformed row(s) in {cfg.input}")
    if not ds.records:
        raise io.ConfigError("no usable records")
    scheme = cfg.scheme()
    opts = FitOptions(method=cfg.method, **cfg.optimizer)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = fit(ds.records, scheme, opts)
    inf = delta_variance(result, np.array(cfg.contrast))
    report = io.fit_report(result, inf, ds, cfg.labels)
    _emit(io.dumps(report), cfg.out)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    cfg = io.load_config(
        args.config,
        method=args.method,
        grouping=args.grouping,
        contrast=args.contrast,
        out=args.out,
        seed=args.seed,
        reps=args.reps,
        threads=args.threads,
    )
    table = dict(cfg.scenario)
    if args.scenario:
        table.setdefault("base", args.scenario)
    if args.grouping:
        table["grouping"] = args.grouping
    try:
        scn = io.scenario_from_config(table, seed=cfg.seed, n_pairs=args.n_pairs)
    except InvalidScenario as exc:
        raise io.ConfigError(f"invalid scenario: {exc}") from None
    if args.dataset_out:
        io.write_csv(simulate_dataset(scn, 0), args.dataset_out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = run_calibration(scn, cfg.reps, cfg.method, threads=cfg.threads, contrast=cfg.contrast)
    _emit(io.dumps(rep.to_dict()), cfg.out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "patterns": cmd_patterns, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, io.MalformedHeader, io.ConfigError, InvalidScenario) as exc:
        _err(str(exc))
        return EXIT_INPUT
    except (RankDeficient, SingularSubcovariance, ValueError) as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
