"""Command-line entry point: ``backflash simulate|analyze|keyrate|preset``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import ConfigError, dump_config, read_config

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("backflash")


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"invalid JSON in {path}: {exc}") from None


def _scenario(args):
    if bool(args.config) == bool(args.preset):
        raise ConfigError("--config", "give exactly one of --config or --preset")
    if args.config:
        cfg = read_config(args.config)
    else:
        doc = pipeline.load_preset(args.preset)
        if "config" not in doc:
            raise ConfigError("--preset", f"preset {args.preset!r} has no scenario")
        from .config import load_config
        cfg = load_config(doc["config"])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    logs = pipeline.simulate(cfg, args.out, jobs=args.jobs)
    total = sum(len(x) for x in logs.values())
    log.info("wrote %d clicks to %s", total, args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    spec = _load_json(args.spec, "--spec") if args.spec else None
    est = pipeline.analyze(args.input, args.out, spec)
    for k, v in est.items():
        print(f"{k},{v}")
    return EXIT_OK


def cmd_keyrate(args) -> int:
    spec = _load_json(args.spec, "--spec") if args.spec else {}
    for key in ("p_det", "qber", "p_e", "leak_ec", "f_ec"):
        v = getattr(args, key)
        if v is not None:
            spec[key] = v
    if args.sweep:
        spec["sweep"] = {"variable": args.sweep, "points": args.points}
        if args.start is not None:
            spec["sweep"]["start"] = args.start
        if args.stop is not None:
            spec["sweep"]["stop"] = args.stop
    est = pipeline.read_estimates(args.estimates) if args.estimates else None
    rows = pipeline.keyrate_table(spec, est, args.reverse_transmission)
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "keyrate.csv"
    pipeline.write_keyrate(rows, out)
    log.info("wrote %d rows to %s", len(rows), out)
    return EXIT_OK


def cmd_preset(args) -> int:
    if args.action == "list":
        for name in pipeline.preset_names():
            print(f"{name}: {pipeline.load_preset(name).get('description', '')}")
        return EXIT_OK
    if not args.name:
        raise ConfigError("preset", "name required")
    if args.action == "show":
        doc = pipeline.load_preset(args.name)
        if "config" in doc:
            from .config import load_config
            doc = dict(doc, config=dump_config(load_config(doc["config"])))
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    out = args.out or f"out/{args.name}"
    est = pipeline.run_preset(args.name, out, seed=args.seed, jobs=args.jobs)
    for k, v in est.items():
        print(f"{k},{v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backflash", description="Detector backflash side-channel simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write click logs")
    s.add_argument("--config", help="scenario JSON file")
    s.add_argument("--preset", help="use a bundled preset's scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="histograms, peaks, estimates and R matrix")
    a.add_argument("input", help="directory written by simulate")
    a.add_argument("--spec", help="analysis JSON overriding the defaults")
    a.add_argument("--out", help="output directory (default: the input directory)")
    a.set_defaults(func=cmd_analyze)

    k = sub.add_parser("keyrate", help="tagged-signal key rate, single point or sweep")
    k.add_argument("--spec", help="key-rate JSON")
    k.add_argument("--p-det", dest="p_det", type=float)
    k.add_argument("--qber", type=float)
    k.add_argument("--p-e", dest="p_e", type=float)
    k.add_argument("--leak-ec", dest="leak_ec", type=float)
    k.add_argument("--f-ec", dest="f_ec", type=float)
    k.add_argument("--sweep", choices=("p_e", "qber", "p_det"))
    k.add_argument("--start", type=float)
    k.add_argument("--stop", type=float)
    k.add_argument("--points", type=int, default=1000)
    k.add_argument("--estimates", help="estimates.csv adding a worst-case tagged-fraction row")
    k.add_argument("--reverse-transmission", dest="reverse_transmission", type=float)
    k.add_argument("--out", required=True, help="CSV path or directory")
    k.set_defaults(func=cmd_keyrate)

    r = sub.add_parser("preset", help="list, show or run bundled experiments")
    r.add_argument("action", choices=("list", "show", "run"))
    r.add_argument("name", nargs="?")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        # bad input files surface here as well
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AssertionError, RuntimeError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
