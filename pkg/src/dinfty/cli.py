"""Command line entry point: ``dinfty {sample,transport,match,experiment,fit}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import DensityError, DomainError, EmpiricalMeasure, density_from_config, sample
from .experiment import ConfigError, ExperimentConfig, fit_rate, load_json, medians_by_n, read_csv, run_experiment
from .matching import hall_matching_2d

log = logging.getLogger("dinfty")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _density(path: str):
    try:
        return density_from_config(load_json(path))
    except (DensityError, DomainError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_sample(args) -> int:
    dens = _density(args.config)
    emp = sample(dens, args.n, args.seed)
    if args.out:
        emp.to_csv(args.out)
    else:
        for p in emp.points:
            print(",".join(repr(float(x)) for x in p))
    return EXIT_OK


def _load_sample(args, dens):
    if args.sample:
        return EmpiricalMeasure.from_csv(args.sample)
    if args.n is None:
        raise ConfigError("give --sample or --n")
    return sample(dens, args.n, args.seed)


def cmd_transport(args) -> int:
    from .domains import build_wp, rebalance_and_recurse
    from .experiment import build_transport

    dens = _density(args.config)
    if args.target:
        target = _density(args.target)
        tr = rebalance_and_recurse(dens, target, build_wp(dens.domain))
    else:
        emp = _load_sample(args, dens)
        tr = build_transport(dens, emp, args.scheme, args.alpha, args.l_cfg)
    summary = tr.summary()
    summary["info"] = {k: v for k, v in tr.info.items() if isinstance(v, (int, float, str, bool, list))}
    _emit(summary, args.out)
    return EXIT_OK


def cmd_match(args) -> int:
    dens = _density(args.config)
    if dens.dim != 2 or len(dens.domain.boxes) != 1:
        raise ConfigError("match needs a planar single-box density")
    emp = _load_sample(args, dens)
    ht = hall_matching_2d(dens, emp, l_cfg=args.l_cfg)
    res = json.loads(ht.matching.summary_json())
    res["displacement"] = ht.displacement
    _emit(res, args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.base_seed = args.seed
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.l_cfg is not None:
        cfg.l_cfg = args.l_cfg
    if args.out:
        cfg.out = args.out
    if args.no_timing:
        cfg.record_timing = False
    cfg.__post_init__()
    res = run_experiment(cfg)
    log.info("wrote %s (%d trials, %d failed)", res.out_dir, len(res.rows), res.failures)
    return EXIT_PARTIAL if res.failures else EXIT_OK


def cmd_fit(args) -> int:
    rows = read_csv(args.csv)
    fit = fit_rate(medians_by_n(rows), args.dim)
    _emit(
        {
            "exponent": fit.exponent,
            "intercept": fit.intercept,
            "log_correction_exponent": fit.log_correction_exponent,
            "residual_slope": fit.residual_slope,
            "medians": fit.medians,
        },
        args.out,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dinfty", description="Bounds on the infinity-transport distance to empirical measures.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, defaults=True):
        sp.add_argument("--config", required=True, help="JSON density or experiment config")
        sp.add_argument("--seed", type=int, default=0 if defaults else None)
        sp.add_argument("--alpha", type=float, default=3.0 if defaults else None)
        sp.add_argument("--l-cfg", dest="l_cfg", type=float, default=1.0 if defaults else None)
        sp.add_argument("--out")

    sp = sub.add_parser("sample", help="draw a sample from a density")
    common(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("transport", help="build a transport and print its certified bound")
    common(sp)
    sp.add_argument("--target", help="second density config (density-to-density)")
    sp.add_argument("--sample", help="CSV sample (density-to-empirical)")
    sp.add_argument("--n", type=int)
    sp.add_argument("--scheme", choices=["highd", "hall2d", "auto"], default="auto")
    sp.set_defaults(func=cmd_transport)

    sp = sub.add_parser("match", help="planar rectangle-to-sample bottleneck matching")
    common(sp)
    sp.add_argument("--sample")
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("experiment", help="run an experiment config")
    common(sp, defaults=False)
    sp.add_argument("--no-timing", action="store_true", help="write wall_ms as 0 for byte-identical CSVs")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("fit", help="fit the decay rate of a trials CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DensityError, DomainError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
