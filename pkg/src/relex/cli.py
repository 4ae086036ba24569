"""Command-line entry point.

Exit status: 0 on success, 2 for invalid input (bad flags, missing or
malformed series, schema mismatches), 3 for numerical failures, with the
offending tensor named on stderr.
"""

import argparse
import json
import sys

from . import pipeline, store
from .errors import ConfigError, NumericalError, RelexError
from .synth import PlantConfig, plant_series

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

# flag defaults; None marks "not given" so config values can fill them in
DEFAULTS = {
    "method": "relex",
    "rank": 1,
    "fit": "linear",
    "space": "svd",
    "workers": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _common(p, *flags):
    if "series" in flags:
        p.add_argument("--series", help="series directory")
    if "t_cut" in flags:
        p.add_argument("--t-cut", type=int, help="last step the method may observe")
    if "targets" in flags:
        p.add_argument("--targets", type=_int_list, help="comma-separated target steps")
    if "rank" in flags:
        p.add_argument("--rank", type=int, help="retained rank (default 1)")
    if "method" in flags:
        p.add_argument("--method", choices=pipeline.METHODS, help="default relex")
        p.add_argument("--fit", choices=pipeline.FITS, help="coefficient fit (default linear)")
        p.add_argument("--space", choices=pipeline.SPACES, help="fit space (default svd)")
        p.add_argument("--alpha", type=float, help="ExPO step size (required for expo)")
        p.add_argument("--t0", type=int, help="first anchor step (required for weight)")
    if "workers" in flags:
        p.add_argument("--workers", type=int, help="tensors processed concurrently (default 1)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON file of option values; flags override it")


def build_parser():
    parser = _Parser(prog="relex", description="Trajectory SVD extrapolation of checkpoint series.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("inspect", help="print the series layout as JSON")
    _common(p, "series")
    p.add_argument("--verify", action="store_true", help="check every blob checksum")

    p = sub.add_parser("diagnose", help="linearity, explained-variance and coefficient reports")
    _common(p, "series", "t_cut", "rank", "workers")

    p = sub.add_parser("extrapolate", help="predict checkpoints at target steps")
    _common(p, "series", "t_cut", "targets", "rank", "method", "workers")

    p = sub.add_parser("reconstruct", help="rank-r reconstruction of observed checkpoints")
    _common(p, "series", "t_cut", "rank", "workers")
    p.add_argument("--steps", type=_int_list, help="observed steps to reconstruct (default all <= t_cut)")

    p = sub.add_parser("sweep", help="grid of observation windows and targets")
    _common(p, "series", "targets", "rank", "method", "workers")
    p.add_argument("--t-cuts", type=_int_list, help="comma-separated observation windows")
    p.add_argument("--no-cache", action="store_true", help="recompute Gram matrices per window")

    p = sub.add_parser("align", help="cosine and norm ratio of predicted vs actual deltas")
    _common(p, "series")
    p.add_argument("--predicted", help="series holding the predictions")
    p.add_argument("--steps", type=_int_list, help="steps to compare (default: all shared)")
    p.add_argument("--base-step", type=int, help="reference step (default: base of --series)")

    p = sub.add_parser("synth", help="write a planted series from a JSON config")
    p.add_argument("--config", help="PlantConfig JSON file")
    p.add_argument("--out", help="output directory")
    return parser


def _options(args):
    """Merge flags over the --config file over the defaults."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None) and args.command != "synth":
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key in ("targets", "t_cuts", "steps") and isinstance(value, str):
                value = _int_list(value)
            opts[key] = value
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config"):
            opts[key] = value
    return opts


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _open(path):
    return store.open_series(path)


def _run_options(opts):
    return pipeline.RunOptions(
        t_cut=opts.get("t_cut") or 0,
        targets=opts["targets"],
        method=opts["method"],
        rank=int(opts["rank"]),
        fit=opts["fit"],
        space=opts["space"],
        alpha=opts.get("alpha"),
        t0=opts.get("t0"),
        workers=int(opts["workers"]),
    )


def _check_method_params(opts):
    if opts["method"] == "expo" and opts.get("alpha") is None:
        raise UsageError("method expo requires --alpha")
    if opts["method"] == "weight" and opts.get("t0") is None:
        raise UsageError("method weight requires --t0")


def cmd_inspect(opts):
    _require(opts, "series")
    series = store.open_series(opts["series"], verify=bool(opts.get("verify")))
    text = json.dumps(pipeline.describe_series(series), indent=1, sort_keys=True)
    print(text)
    if opts.get("out"):
        pipeline.write_json(f"{opts['out']}/inspect.json", pipeline.describe_series(series))


def cmd_diagnose(opts):
    _require(opts, "series", "t_cut", "out")
    series = _open(opts["series"])
    report = pipeline.run_diagnose(series, opts["t_cut"], int(opts["rank"]), opts["out"],
                                   workers=int(opts["workers"]))
    print(f"{len(report.records)} tensors, {len(report.skipped)} skipped, "
          f"fraction R2 > {report.threshold}: {pipeline.fmt(report.fraction_above)}")


def cmd_extrapolate(opts):
    _require(opts, "series", "t_cut", "targets", "out")
    _check_method_params(opts)
    series = _open(opts["series"])
    summary = pipeline.run_extrapolate(series, _run_options(opts), opts["out"])
    print(f"wrote {len(summary['targets'])} checkpoint(s) to {opts['out']}")


def cmd_reconstruct(opts):
    _require(opts, "series", "t_cut", "out")
    series = _open(opts["series"])
    summary = pipeline.run_reconstruct(series, opts["t_cut"], int(opts["rank"]), opts["out"],
                                       steps=opts.get("steps"), workers=int(opts["workers"]))
    print(f"reconstructed {len(summary['steps'])} checkpoint(s) at rank {summary['rank']}")


def cmd_sweep(opts):
    _require(opts, "series", "t_cuts", "targets", "out")
    _check_method_params(opts)
    series = _open(opts["series"])
    grid = pipeline.SweepGrid(opts["t_cuts"], opts["targets"])
    run = _run_options({**opts, "t_cut": grid.t_cuts[0]})
    rows, failures = pipeline.run_sweep(series, grid, run, opts["out"],
                                        use_cache=not opts.get("no_cache"))
    print(f"{len(rows)} cells, {sum(r[3] == 'ok' for r in rows)} ok")
    if failures:
        first = failures[min(failures)]
        for c in sorted(failures):
            print(f"error: t_cut {c}: {pipeline.describe_error(failures[c])}", file=sys.stderr)
        return _exit_code(first)
    return EXIT_OK


def cmd_align(opts):
    _require(opts, "series", "predicted", "out")
    actual = _open(opts["series"])
    predicted = _open(opts["predicted"])
    records = pipeline.run_align(predicted, actual, opts["out"], opts.get("steps"), opts.get("base_step"))
    for r in records:
        print(f"step {r.step}: mean cosine {pipeline.fmt(r.mean_cosine)}, "
              f"mean norm ratio {pipeline.fmt(r.mean_norm_ratio)}")


def cmd_synth(opts):
    _require(opts, "config", "out")
    cfg = PlantConfig.load(opts["config"])
    series, _ = plant_series(cfg, opts["out"])
    print(f"wrote {len(series.steps)} checkpoints to {opts['out']}")


COMMANDS = {
    "inspect": cmd_inspect,
    "diagnose": cmd_diagnose,
    "extrapolate": cmd_extrapolate,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "align": cmd_align,
    "synth": cmd_synth,
}


def _exit_code(exc):
    return EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_INVALID


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        opts = _options(args)
        if args.command == "synth":
            opts["config"] = args.config
        status = COMMANDS[args.command](opts)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RelexError as exc:
        print(f"error: {pipeline.describe_error(exc)}", file=sys.stderr)
        return _exit_code(exc)
    except (ValueError, TypeError) as exc:
        # malformed config values that slipped past argparse
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
