"""Command-line entry point.

    fruitvox <stage> -c config.json [-o outdir] [--section.key=value ...]
    fruitvox validate -c config.json

Stages: synth, train, export, count, eval, sweep, e2e. Overrides use dotted
paths into the config (e.g. --count.dbscan.eps=0.02); values are parsed as
JSON, falling back to strings. The output directory comes from -o, else the
FRUITVOX_OUTPUT_DIR environment variable, else the config's output_dir.

Exit codes: 0 success, 2 config validation failure, 3 missing upstream
artifact, 1 any other error. Failures print a one-line JSON error to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

from . import pipeline

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3

_OVERRIDE_RE = re.compile(r"^--([A-Za-z0-9_][A-Za-z0-9_.\[\]]*)=(.*)$", re.S)


def _machine_error(kind, message, **extra):
    payload = {"error": kind, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _parse_overrides(tokens):
    overrides = {}
    for tok in tokens:
        m = _OVERRIDE_RE.match(tok)
        if not m:
            raise ValueError(f"unrecognized argument {tok!r} (overrides look like --a.b.c=value)")
        path, raw = m.groups()
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[path] = value
    return overrides


def _load_effective_config(args, extra_tokens):
    with open(args.config) as fh:
        raw = json.load(fh)
    overrides = _parse_overrides(extra_tokens)
    if overrides:
        raw = pipeline.apply_overrides(raw, overrides)
    cfg, diags = pipeline.validate_config(raw)
    return cfg, [str(d) for d in diags]


def _resolve_outdir(args, cfg) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    env = os.environ.get("FRUITVOX_OUTPUT_DIR")
    if env:
        return Path(env)
    return Path(cfg["output_dir"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fruitvox", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in (*pipeline.STAGES, "validate"):
        p = sub.add_parser(stage)
        p.add_argument("-c", "--config", required=True, help="pipeline config JSON")
        p.add_argument("-o", "--output-dir", default=None,
                       help="output directory (overrides config and FRUITVOX_OUTPUT_DIR)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    try:
        cfg, diags = _load_effective_config(args, extra)
    except FileNotFoundError as exc:
        _machine_error("config_unreadable", str(exc))
        return EXIT_CONFIG
    except (json.JSONDecodeError, ValueError) as exc:
        _machine_error("config_parse", str(exc))
        return EXIT_CONFIG

    if args.stage == "validate":
        for d in diags:
            print(d)
        if diags:
            _machine_error("config_invalid", f"{len(diags)} diagnostic(s)", diagnostics=diags)
            return EXIT_CONFIG
        print("config ok")
        return EXIT_OK

    if diags:
        for d in diags:
            print(d, file=sys.stderr)
        _machine_error("config_invalid", f"{len(diags)} diagnostic(s)", diagnostics=diags)
        return EXIT_CONFIG

    outdir = _resolve_outdir(args, cfg)
    try:
        result = pipeline.STAGES[args.stage](cfg, outdir)
    except pipeline.MissingArtifactError as exc:
        _machine_error("missing_artifact", str(exc), artifact=exc.artifact,
                       stage_to_run=exc.stage_to_run)
        return EXIT_MISSING_ARTIFACT
    except pipeline.ConfigError as exc:
        _machine_error("config_invalid", str(exc), diagnostics=exc.diagnostics)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as machine-readable internal error
        _machine_error("internal", f"{type(exc).__name__}: {exc}", stage=args.stage)
        return EXIT_INTERNAL

    if args.stage in ("eval", "e2e"):
        print(f"precision={result.precision:.4f} recall={result.recall:.4f} f1={result.f1:.4f}")
    elif args.stage == "count":
        print(f"total={result.total}")
    print(f"{args.stage}: ok ({outdir})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
