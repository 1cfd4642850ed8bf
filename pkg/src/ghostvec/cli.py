"""Command line front end: one subcommand per pipeline stage plus `all`.

Exit codes: 0 success, 1 internal failure, 2 missing prerequisite artifact,
3 configuration problem. Failures also print one machine-readable line to
stderr: `GHOSTVEC_ERROR {"code": ..., "stage": ..., "message": ...}`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config

_STAGE_HELP = {
    "corpus": "generate the synthetic speaker corpus and feature files",
    "train-asr": "train the speaker-adapted recognizer on the training split",
    "train-sv": "train the speaker-verification encoder on all speakers",
    "attack": "extract ghost embeddings for every configured target",
    "svd-transfer": "rebuild ghost matrices with nearest-template factors",
    "synth": "fit the voice map and synthesize all three conditions",
    "score": "score verification trials and decode synthesized audio",
    "report": "assemble the metrics report, clustering, and projection",
    "all": "run every stage in dependency order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ghostvec",
        description="Speaker-embedding extraction lab: corpus, attack, transfer, scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*pipeline.STAGE_ORDER, "all"):
        p = sub.add_parser(name, help=_STAGE_HELP[name])
        p.add_argument("--config", help="path to the pipeline config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="output directory (overrides GHOSTVEC_OUT and config)")
        p.add_argument("--force", action="store_true", help="rerun even on a cache hit")
    return parser


def _emit_error(code: int, stage: str, exc: BaseException) -> int:
    payload = {"code": code, "stage": stage, "message": str(exc)}
    print(f"GHOSTVEC_ERROR {json.dumps(payload, sort_keys=True)}", file=sys.stderr)
    return code


def _print_record(rec: dict) -> None:
    mark = "cached" if rec["status"] == "cached" else f"{rec['wall_time_s']:.1f}s"
    print(f"[{rec['stage']}] {rec['status']} ({mark})")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = pipeline.resolve_out_dir(cfg, args.out)
    except ConfigError as exc:
        return _emit_error(3, args.command, exc)

    try:
        if args.command == "all":
            pipeline.run_all(cfg, out, force=args.force, on_record=_print_record)
        else:
            _print_record(pipeline.run_stage(cfg, out, args.command, force=args.force))
    except ConfigError as exc:
        return _emit_error(3, args.command, exc)
    except pipeline.MissingPrerequisiteError as exc:
        return _emit_error(2, args.command, exc)
    except Exception as exc:  # noqa: BLE001 - boundary: map anything else to exit 1
        return _emit_error(1, args.command, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
