"""Command-line entry point: ``dagan <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 invalid configuration or a
premise violation, 3 missing upstream artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import NonFiniteError
from .cyclegan import run_training, transform_dataset
from .data import PremiseViolation, allow_target_labels, audit_scope
from .pipeline import (
    UPPER,
    ConfigError,
    MissingArtifact,
    PipelineConfig,
    _corpus,
    _dump,
    evaluate_detection_file,
    evaluate_detector,
    gan_index,
    load_corpus_dir,
    load_detector,
    load_manifest,
    output_root,
    parse_config,
    run_compare,
    save_detector,
    train_and_score,
    write_config,
    write_report,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("dagan")


class _Parser(argparse.ArgumentParser):
    # argparse would use 2, which is reserved for configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out: dict = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _value(value)
    flag_keys = {
        "seed": "seed",
        "output_dir": "output_dir",
        "lambda_cycle": "gan.lambda_cycle",
        "total_steps": "gan.total_steps",
        "mode": "gan.mode",
        "epochs": "detector.epochs",
        "replicates": "compare.replicates",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "conditioned", False):
        out["gan.conditioned"] = True
    return out


def resolve_config(args) -> PipelineConfig:
    """File values, then ``--set`` pairs, then dedicated flags."""
    return parse_config(args.config, _overrides(args))


def _corpus_dir(args, root: Path) -> Path:
    return Path(args.corpus) if args.corpus else root / "corpus"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args, config: PipelineConfig, root: Path) -> int:
    corpus = _corpus(config, root)
    write_config(config, root / "corpus")
    print(f"corpus: {len(corpus.source_train)} source, {len(corpus.target_train)} target train, "
          f"{len(corpus.target_test)} target test -> {root / 'corpus'}")
    return EXIT_OK


def cmd_train_gan(args, config: PipelineConfig, root: Path) -> int:
    corpus = load_corpus_dir(_corpus_dir(args, root))
    gan = config.gan_config(config.seed)
    out = Path(args.out) if args.out else root / "gan"
    with audit_scope("train-gan"):
        run = run_training(corpus.source_train, corpus.target_train, gan, out)
    write_config(config, out)
    print(f"{len(run.states)} model(s) -> {run.index_path}")
    return EXIT_OK


def cmd_transform(args, config: PipelineConfig, root: Path) -> int:
    index = gan_index(args.gan or root / "gan")
    source = load_manifest(args.manifest) if args.manifest else load_corpus_dir(_corpus_dir(args, root)).source_train
    out = Path(args.out) if args.out else root / "translated"
    manifest = transform_dataset(index, source, out)
    write_config(config, out)
    print(f"{len(manifest)} images -> {out}")
    return EXIT_OK


def _training_manifest(args, root: Path):
    if args.manifest:
        return load_manifest(args.manifest)
    corpus = load_corpus_dir(_corpus_dir(args, root))
    return corpus.target_train_labeled if args.split == "target_train_labeled" else getattr(corpus, args.split)


def cmd_train_detector(args, config: PipelineConfig, root: Path) -> int:
    manifest = _training_manifest(args, root)
    if manifest.split == "target_train" and manifest.box_count() == 0:
        raise ConfigError("target_train carries no boxes; use --split target_train_labeled with --allow-target-labels")
    test = load_corpus_dir(_corpus_dir(args, root)).target_test
    out = Path(args.out) if args.out else root / "detector"
    regime = UPPER if args.allow_target_labels else "train-detector"
    with allow_target_labels() if args.allow_target_labels else audit_scope(regime):
        metrics = train_and_score(regime, manifest, test, config, config.seed, out)
    write_config(config, out)
    print(f"detector -> {out / 'detector.ckpt'}; target test mAP {metrics['map']:.4f}")
    return EXIT_OK


def cmd_evaluate(args, config: PipelineConfig, root: Path) -> int:
    test = load_manifest(args.manifest) if args.manifest else load_corpus_dir(_corpus_dir(args, root)).target_test
    out = Path(args.out) if args.out else root / "evaluation"
    if args.detections:
        metrics = evaluate_detection_file(args.detections, test, config.evaluation)
        _dump(out / "metrics.json", metrics)
    else:
        params, spec = load_detector(args.detector or root / "detector" / "detector.ckpt")
        metrics = evaluate_detector(params, spec, test, config.evaluation, out)
    write_config(config, out)
    corloc = "absent" if metrics["corloc"] is None else f"{metrics['corloc']:.4f}"
    print(f"mAP {metrics['map']:.4f}  CorLoc {corloc}  -> {out / 'metrics.json'}")
    return EXIT_OK


def cmd_compare(args, config: PipelineConfig, root: Path) -> int:
    payload = run_compare(config, root, allow_upper=args.allow_target_labels)
    width = max(len(r["regime"]) for r in payload["rows"])
    for row in payload["rows"]:
        print(f"{row['regime']:<{width}}  mAP {row['map_median']:.4f}")
    print(f"table -> {root / 'compare' / 'compare.csv'}")
    return EXIT_OK


def cmd_report(args, config: PipelineConfig, root: Path) -> int:
    out = Path(args.out) if args.out else root / "report.csv"
    write_report(out, args.results)
    write_config(config, out.parent)
    print(f"report -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (missing keys take defaults)")
    common.add_argument("--output-dir", help="artifact root, relative paths resolve under $DAGAN_OUTPUT_ROOT")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. gan.crop_to=32")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dagan", description="Pixel-level domain adaptation for object detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", parents=[common], help="write the seeded synthetic corpus")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-gan", parents=[common], help="train translation model(s)")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--lambda-cycle", type=float)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--mode", choices=("cycle", "forward"))
    p.add_argument("--conditioned", action="store_true")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("transform", parents=[common], help="translate a source manifest")
    p.add_argument("--gan", help="GAN output directory or its checkpoints.json")
    p.add_argument("--corpus")
    p.add_argument("--manifest", help="manifest to translate (default: corpus source_train)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train-detector", parents=[common], help="train and score one detector")
    p.add_argument("--corpus")
    p.add_argument("--manifest", help="training manifest (default: corpus split)")
    p.add_argument("--split", default="source_train", choices=("source_train", "target_train_labeled"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--allow-target-labels", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("evaluate", parents=[common], help="score a detector or a detections file")
    p.add_argument("--corpus")
    p.add_argument("--manifest", help="test manifest (default: corpus target_test)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--detector", help="detector checkpoint")
    group.add_argument("--detections", help="detections JSONL")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="every training regime, scored on target test")
    p.add_argument("--replicates", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--lambda-cycle", type=float)
    p.add_argument("--allow-target-labels", action="store_true", help="add the labeled-target upper bound")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", parents=[common], help="merge metrics/compare JSON files into one CSV")
    p.add_argument("results", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        return args.func(args, config, output_root(config))
    except (ConfigError, PremiseViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
