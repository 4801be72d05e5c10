"""``istr`` command line: one subcommand per pipeline stage plus ``run-all``.

Exit status: 0 on success, 1 when the config fails validation, 2 when a
stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from istr import __version__
from istr.pipeline import CACHE_ENV, GROUPS, STAGES, ConfigError, PipelineConfig, StageError, run_pipeline

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2

COMMANDS = {
    "build-corpus": "corpus",
    "build-datasets": "datasets",
    "train-presence": "presence_train",
    "eval-presence": "presence_eval",
    "explain": "explain",
    "train-region": "region_train",
    "eval-region": "region_eval",
    "build-recovery": "recovery_build",
    "train-recovery": "recovery_train",
    "eval-recovery": "recovery_eval",
    "report": "report",
}
HELP = {
    "corpus": "render or import the image corpus",
    "datasets": "derive the protocol 1/2/3 presence datasets and splits",
    "presence_train": "train the text-removal presence classifier per protocol",
    "presence_eval": "test-set accuracy of the presence classifier",
    "explain": "Grad-CAM heatmaps for test positives and their localization rate",
    "region_train": "train the removed-region detector",
    "region_eval": "mean union IoU of the region detector, with overlays",
    "recovery_build": "pair removed-text crops with their former text",
    "recovery_train": "train the recognizer on removed-text crops",
    "recovery_eval": "best/last Text- and Char-Accuracy per split",
    "report": "render tables from every report in the bundle",
}


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key, yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config with per-stage sections (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="global seed, propagated to every stage")
    common.add_argument("--workers", type=int, help="CPU threads for numerical work")
    common.add_argument("--out", help=f"bundle directory (default: ${CACHE_ENV} or ./istr-out)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="deterministic kernels and seeded data order")
    common.add_argument("--set", dest="overrides", action="append", type=_override, default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. presence.epochs=5")
    common.add_argument("--force", action="store_true", help="rerun requested stages even when up to date")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="istr", description="Inverse scene-text-removal experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, stage in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=HELP[stage], description=HELP[stage])
    run_all = sub.add_parser("run-all", parents=[common], help="run every stage (or those given by --stage)")
    run_all.add_argument("--stage", action="append", default=None,
                         choices=list(STAGES) + sorted(GROUPS), help="restrict to these stages (repeatable)")
    return parser


def _config(args) -> PipelineConfig:
    overrides = dict(args.overrides)
    for key in ("seed", "workers", "out", "deterministic"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.command == "run-all":
        if args.stage:
            overrides["stages"] = args.stage
    else:
        overrides["stages"] = [COMMANDS[args.command]]
    if args.config:
        return PipelineConfig.load(args.config, overrides)
    return PipelineConfig.from_dict({}, overrides)


def _summary(root) -> list[str]:
    index = json.loads((root / "index.json").read_text())
    rows = ["stage\tstatus\tfingerprint\treports"]
    for stage in (s for s in STAGES if s in index["stages"]):
        info = index["stages"][stage]
        rows.append(f"{stage}\t{info['status']}\t{info['fingerprint']}\t{','.join(info.get('reports') or [])}")
    return rows


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = _config(args)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    try:
        root = run_pipeline(config, force=args.force)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    for row in _summary(root):
        print(row)
    report = root / "report" / "report.md"
    if "report" in config.requested_stages() and report.exists():
        print()
        print(report.read_text(), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
