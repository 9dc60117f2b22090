"""Command-line interface.

Subcommands: ``calibrate`` (noise round trip), ``bounds`` (theory only),
``train``, ``attack``, ``report`` (assemble from stored run records),
``curves`` (cumulative-error figure only) and ``detect`` (imprint check on a
stored model). All state persists as files in the output directory.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 partial results.
"""

from __future__ import annotations

import argparse
import sys

from . import accountant, imprint, models, pipeline, rero
from .config import ExperimentConfig, default_config, load_config
from .errors import ConfigError, DpAuditError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


def _parse_eps_list(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", type=int, help="seeds per budget")
    p.add_argument("--eps", type=_parse_eps_list, help="comma-separated budget grid")
    p.add_argument("--delta", type=float, help="DP delta")
    p.add_argument("--parallel", type=int, help="concurrent training cells")
    p.add_argument("--format", dest="formats",
                   help="report formats: json|csv|svg|all (comma-separated)")


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    formats = None
    if getattr(args, "formats", None):
        from .config import _parse_formats

        formats = _parse_formats(args.formats)
    return cfg.with_overrides(**{
        "out": args.out,
        "seeds": args.seeds,
        "privacy.epsilons": args.eps,
        "privacy.delta": args.delta,
        "parallel": args.parallel,
        "report.formats": formats,
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpaudit",
        description="DP training, reconstruction-robustness bounds, and "
                    "gradient-inversion risk profiles on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="round-trip a noise multiplier for a target budget")
    _add_common(p)
    p.add_argument("--target", type=float, required=True, help="target epsilon")
    p.add_argument("--q", type=float, help="sampling rate (default from config)")
    p.add_argument("--steps", type=int, help="composition steps (default from config)")

    p = sub.add_parser("bounds", help="theoretical bounds over a budget grid")
    _add_common(p)
    p.add_argument("--kappa", type=float, help="prior success probability")
    p.add_argument("--q", type=float, help="sampling rate (default from config)")
    p.add_argument("--steps", type=int, help="composition steps (default from config)")

    for name, doc in (("train", "train all (budget x seed) cells"),
                      ("report", "assemble the risk profile from stored records"),
                      ("curves", "emit cumulative reconstruction-error curves")):
        p = sub.add_parser(name, help=doc)
        _add_common(p)

    p = sub.add_parser("attack", help="run the gradient-inversion campaign")
    _add_common(p)
    p.add_argument("--budget", help="single budget label (e.g. 8 or nonprivate)")

    p = sub.add_parser("detect", help="imprint check on a stored model file")
    p.add_argument("--model", required=True, help="model container path")
    return parser


def _cmd_calibrate(args) -> int:
    cfg = _resolve_config(args)
    dataset = pipeline.build_dataset(cfg)
    q, steps = pipeline.planned_steps(cfg, dataset)
    q = args.q if args.q is not None else q
    steps = args.steps if args.steps is not None else steps
    delta = cfg["privacy.delta"]
    sigma = accountant.calibrate_sigma(args.target, delta, q, steps)
    spent = accountant.to_epsilon_delta(
        accountant.compose(accountant.step_curve(sigma, q), steps), delta)
    print(f"target_epsilon={args.target:g} q={q:g} steps={steps} delta={delta:g}")
    print(f"sigma={sigma:.6g} achieved_epsilon={spent.json_epsilon()}")
    return EXIT_OK


def _cmd_bounds(args) -> int:
    cfg = _resolve_config(args)
    dataset = pipeline.build_dataset(cfg)
    q, steps = pipeline.planned_steps(cfg, dataset)
    q = args.q if args.q is not None else q
    steps = args.steps if args.steps is not None else steps
    kappa = args.kappa if args.kappa is not None else pipeline.resolve_kappa(cfg, dataset)
    rows = rero.bound_curve(list(cfg["privacy.epsilons"]), kappa, q, steps,
                            cfg["privacy.delta"])
    print(f"kappa={kappa:g} q={q:g} steps={steps} delta={cfg['privacy.delta']:g}")
    print(f"{'epsilon':>12} {'sigma':>10} {'worst_case':>11} {'relaxed':>11}")
    for row in rows:
        print(f"{row['epsilon']:>12g} {row['sigma']:>10.4g} "
              f"{row['worst_case']:>11.6f} {row['relaxed']:>11.6f}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    pipeline.train_stage(cfg, cfg["out"])
    print(f"run records written to {cfg['out']}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    cfg = _resolve_config(args)
    labels = [args.budget] if args.budget else None
    if labels is not None:
        known = {p.label for p in pipeline.plan_budgets(cfg)}
        if labels[0] not in known:
            raise ConfigError(f"unknown budget {labels[0]!r}; valid: {sorted(known)}")
    pipeline.attack_stage(cfg, cfg["out"], labels=labels)
    print(f"attack artifacts written to {cfg['out']}")
    return EXIT_OK


def _cmd_report(args) -> int:
    cfg = _resolve_config(args)
    profile, _, partial = pipeline.report_stage(cfg, cfg["out"])
    for row in profile.rows:
        print(f"{row.label}: status={row.status}")
    print(f"report written to {cfg['out']}")
    return EXIT_PARTIAL if partial else EXIT_OK


def _cmd_curves(args) -> int:
    cfg = _resolve_config(args)
    curves = pipeline.curves_stage(cfg, cfg["out"])
    if not curves:
        print("no attack artifacts found", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"curves written to {cfg['out']}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    spec, weights, _ = models.load_model(args.model)
    if imprint.detect_imprint(spec, weights):
        print("imprint detected")
    else:
        print("clean")
    return EXIT_OK


_COMMANDS = {
    "calibrate": _cmd_calibrate,
    "bounds": _cmd_bounds,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "report": _cmd_report,
    "curves": _cmd_curves,
    "detect": _cmd_detect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DpAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
