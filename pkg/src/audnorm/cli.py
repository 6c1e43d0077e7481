"""Command-line entry points for the normalization + unit-discovery pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from .config import load_config
from .dataio import ingest_directory, save_manifest
from .pipeline import ExperimentRunner, report, run_experiment

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser, corpus: bool = True) -> None:
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="run a single seed")
    parser.add_argument("--condition", choices=("clean", "rec", "vc"), default=None,
                        help="override the configured input condition")
    if corpus:
        parser.add_argument("--corpus", default=None,
                            help="restrict to one configured language")
    parser.add_argument("--resume", action="store_true",
                        help="continue from cached stage outputs (default behavior)")
    parser.add_argument("--fresh", action="store_true",
                        help="discard cached outputs of the selected run first")


def _runners(args) -> list[ExperimentRunner]:
    seeds = (args.seed,) if args.seed is not None else None
    config = load_config(args.config, condition=args.condition, seeds=seeds)
    runners = []
    for seed in config.seeds:
        runner = ExperimentRunner(config, seed)
        if getattr(args, "fresh", False):
            shutil.rmtree(runner.run_dir, ignore_errors=True)
            runner = ExperimentRunner(config, seed)
        runners.append(runner)
    return runners


def _languages(runner: ExperimentRunner, args) -> list[str]:
    if getattr(args, "corpus", None):
        if args.corpus not in runner.config.aud_manifests:
            raise SystemExit(f"unknown corpus {args.corpus!r}; configured: "
                             f"{sorted(runner.config.aud_manifests)}")
        return [args.corpus]
    return sorted(runner.config.aud_manifests)


def cmd_ingest(args) -> int:
    manifest = ingest_directory(args.audio_dir, args.language, name=args.name)
    save_manifest(args.output, manifest)
    print(f"wrote {len(manifest)} records ({args.language}) to {args.output}")
    return 0


def cmd_train_vc(args) -> int:
    for runner in _runners(args):
        runner.stage_train_fvae()
        print(f"seed {runner.seed}: conversion model at {runner.fvae_checkpoint_path}")
    return 0


def cmd_extract_styles(args) -> int:
    for runner in _runners(args):
        for language in _languages(runner, args):
            table, _ = runner.stage_styles(language)
            print(f"seed {runner.seed}: {len(table)} styles for {language} "
                  f"at {runner.style_table_path(language)}")
    return 0


def cmd_medoid(args) -> int:
    for runner in _runners(args):
        for language in _languages(runner, args):
            _, medoid_id = runner.stage_styles(language)
            print(f"seed {runner.seed} {language}: medoid {medoid_id}")
    return 0


def cmd_convert(args) -> int:
    for runner in _runners(args):
        for language in _languages(runner, args):
            out = runner.stage_convert(language)
            print(f"seed {runner.seed}: converted {language} into {out}")
    return 0


def cmd_train_aud(args) -> int:
    for runner in _runners(args):
        for language in _languages(runner, args):
            runner.stage_train_aud(language)
            print(f"seed {runner.seed}: unit model for {language} "
                  f"at {runner.hmm_checkpoint_path(language)}")
    return 0


def cmd_decode(args) -> int:
    for runner in _runners(args):
        for language in _languages(runner, args):
            out = runner.stage_decode(language)
            print(f"seed {runner.seed}: transcriptions for {language} at {out}")
    return 0


def cmd_evaluate(args) -> int:
    for runner in _runners(args):
        for language in _languages(runner, args):
            results = runner.stage_evaluate(language)
            print(json.dumps(results, indent=2))
    return 0


def cmd_run(args) -> int:
    seeds = (args.seed,) if args.seed is not None else None
    config = load_config(args.config, condition=args.condition, seeds=seeds)
    if args.fresh:
        for seed in config.seeds:
            shutil.rmtree(Path(config.output_dir) / f"{config.condition}_seed{seed}",
                          ignore_errors=True)
    results = run_experiment(config)
    print(json.dumps(results, indent=2))
    return 0


def cmd_report(args) -> int:
    config = load_config(args.config)
    text = report(config.output_dir, report_dir=args.output)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audnorm",
        description="Speaker normalization by medoid-style conversion with "
                    "HMM-VAE acoustic unit discovery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a manifest from a directory of WAV files")
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--language", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_ingest)

    for name, func, needs_corpus in (
        ("train-vc", cmd_train_vc, False),
        ("extract-styles", cmd_extract_styles, True),
        ("medoid", cmd_medoid, True),
        ("convert", cmd_convert, True),
        ("train-aud", cmd_train_aud, True),
        ("decode", cmd_decode, True),
        ("evaluate", cmd_evaluate, True),
    ):
        p = sub.add_parser(name)
        _add_common(p, corpus=needs_corpus)
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="run every stage for every seed")
    _add_common(p, corpus=False)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate per-seed metrics into a table")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None, help="report directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # stage failures must produce a non-zero exit
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
