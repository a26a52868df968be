"""``musicmos`` command line.

Exit status: 0 when all requested work succeeded, 1 when some of it failed
(failed clips, incomplete cells, undecodable files), 2 for configuration or
usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, MusicMosError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("musicmos")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="run configuration JSON")
    p.add_argument("--fold", type=int, default=None, help="fold index (default: all folds)")
    p.add_argument("--mode", default=None, help="ablation mode A1, A2, A3a, A3b, A3c or A4")
    p.add_argument("--seed", type=int, default=None, help="training seed override")
    p.add_argument("--force", action="store_true", help="recompute outputs that already exist")
    p.add_argument("--output", type=Path, default=None, help="output root override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="musicmos", description="Music quality MOS predictor toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("extract", help="populate the feature cache"))
    _common(sub.add_parser("train", help="train one fold (or all) for a mode"))
    _common(sub.add_parser("evaluate", help="cross-validated report for a mode"))
    _common(sub.add_parser("ablate", help="ablation deltas and Steiger table across evaluated modes"))
    p = sub.add_parser("degrade", help="degradation concordance on fold 0")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p = sub.add_parser("sweep", help="data-efficiency sweep on fold 0")
    _common(p)
    p.add_argument("--sizes", default=None, help="comma-separated sizes, e.g. 100,250,full")
    _common(sub.add_parser("report", help="collect all artefacts into report.json"))

    p = sub.add_parser("score", help="score audio files with a checkpoint")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("paths", nargs="+", type=Path)

    p = sub.add_parser("synth", help="write a synthetic tone-mixture corpus and a matching config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--systems", type=int, default=10)
    p.add_argument("--clips", type=int, default=20, help="clips per system")
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        over.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "output", None) is not None:
        over["output_root"] = str(args.output.resolve())
    if getattr(args, "sizes", None):
        sizes = [s if s == "full" else int(s) for s in args.sizes.split(",")]
        over["sweep"] = {"sizes": sizes}
    return over


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def _synth(args) -> int:
    from .synthetic import generate, write_corpus

    clips = generate(args.systems, args.clips, args.seconds, seed=args.seed)
    manifest = write_corpus(args.out, clips)
    config = {
        "manifest": manifest.name,
        "encoder": "toy-64",
        "mode": "A1",
        "output_root": "runs",
        "audio": {"sample_rate": 24000, "seconds": args.seconds},
        "train": {"max_epochs": 50, "patience": 10, "seed": args.seed},
    }
    (args.out / "config.json").write_text(json.dumps(config, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(clips)} clips, {manifest} and {args.out / 'config.json'}")
    return EXIT_OK


def run(args) -> int:
    from . import pipeline

    if args.command == "synth":
        return _synth(args)

    if args.command == "score":
        cfg = RunConfig.load(args.config, _overrides(args)) if args.config else None
        lines = pipeline.cmd_score(args.checkpoint, args.paths, cfg)
        for line in lines:
            print(line.format())
        return EXIT_FAILED if any(line.error for line in lines) else EXIT_OK

    cfg = RunConfig.load(args.config, _overrides(args))

    if args.command == "extract":
        summary = pipeline.cmd_extract(cfg, force=args.force)
        _print(summary.to_dict())
        return EXIT_OK if summary.ok else EXIT_FAILED
    if args.command == "train":
        folds = [args.fold] if args.fold is not None else None
        for path in pipeline.run_all_folds(cfg, folds, force=args.force):
            print(path)
        return EXIT_OK
    if args.command == "evaluate":
        bundle = pipeline.cmd_evaluate(cfg, force=args.force)
        _print({"mode": bundle.mode, "summary": bundle.summary()})
        return EXIT_OK
    if args.command == "ablate":
        _print(pipeline.cmd_ablate(cfg))
        return EXIT_OK
    if args.command == "degrade":
        report = pipeline.cmd_degrade(cfg, args.checkpoint, force=args.force, mode=args.mode)
        _print(report.to_dict())
        return EXIT_OK if report.complete else EXIT_FAILED
    if args.command == "sweep":
        table = pipeline.cmd_sweep(cfg, force=args.force)
        _print(table.to_dict())
        return EXIT_OK if table.complete else EXIT_FAILED
    if args.command == "report":
        _print(pipeline.cmd_report(cfg))
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MusicMosError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
