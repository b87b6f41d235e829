"""Command-line entry point: ``hrslab <subcommand> --config ... --seed ... --out ...``.

Exit status is 0 on success, 1 for configuration problems and 2 for any
failure while running.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import jsonschema

from . import config as config_mod
from .experiment import emit_report, run_experiment

log = logging.getLogger("hrslab")

# subcommand -> (report parts, defense kinds or None for all)
COMMANDS = {
    "train": ((), ("none", "sap", "dropout", "gaussian", "advtrain")),
    "hrs-train": ((), ("hrs",)),
    "attack": (("attacks",), None),
    "des": (("des",), None),
    "gradstd": (("gradstd",), None),
    "reprogram": (("reprogram",), None),
    "report": (("attacks", "des", "gradstd", "reprogram"), None),
}

HELP = {
    "train": "train the non-HRS models and report their test accuracy",
    "hrs-train": "bottom-up train the HRS models and report per-path accuracy",
    "attack": "run the configured attack grid",
    "des": "compute defense efficiency scores",
    "gradstd": "measure input-gradient dispersion",
    "reprogram": "run the adversarial reprogramming experiment",
    "report": "run every configured analysis",
}


def _load_config(ref):
    if os.path.exists(ref):
        return config_mod.load(ref)
    if ref in config_mod.preset_names():
        return config_mod.bundled(ref)
    raise config_mod.ConfigError(
        f"{ref}: no such file or bundled preset (presets: {', '.join(config_mod.preset_names())})")


def build_parser():
    parser = argparse.ArgumentParser(prog="hrslab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True,
                       help="experiment JSON file or bundled preset name")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed (u64)")
        p.add_argument("--out", default=None, help="report directory (default: config 'output' or ./out)")
        p.add_argument("--workers", type=int, default=None, help="attack worker threads")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.add_argument("--cache", default=None,
                       help="trained-model cache directory (default: <out>/cache)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise config_mod.ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = config_mod.with_seed(cfg, args.seed)
    except (config_mod.ConfigError, jsonschema.ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = args.out or cfg.get("output", "out")
    cache = args.cache or cfg.get("cache") or os.path.join(out, "cache")
    parts, kinds = COMMANDS[args.command]
    try:
        bundle = run_experiment(cfg, cache_dir=cache, workers=args.workers, parts=parts,
                                kinds=kinds)
        paths = emit_report(bundle, out)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
