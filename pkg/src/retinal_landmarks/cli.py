"""Command line entry point: ``retinal-landmarks <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 optic disc not
found, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from retinal_landmarks import __version__, pipeline, synthetic
from retinal_landmarks.errors import InvalidInputError
from retinal_landmarks.imaging import load_image, to_grayscale

log = logging.getLogger("retinal_landmarks")

CACHE_ENV = "RETINAL_LANDMARKS_CACHE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for "disc not found"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(pipeline.EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path.home() / ".cache" / "retinal_landmarks"


def default_model_dir() -> Path:
    return cache_dir() / "model"


def _config(args) -> pipeline.PipelineConfig:
    return pipeline.load_config(args.config, pipeline.parse_overrides(args.set))


def _model_dir(args) -> Path:
    return Path(args.model) if args.model else default_model_dir()


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("size must look like 1500x1152") from exc
    if w < 64 or h < 64:
        raise argparse.ArgumentTypeError("size must be at least 64x64")
    return w, h


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _model_dir(args)
    artifacts = pipeline.train(args.crops, cfg, out)
    log.info(
        "trained on %d crops: %d words, %d topics -> %s",
        len(artifacts.neighbors), artifacts.codebook.size, artifacts.model.n_topics, out,
    )
    return pipeline.EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    artifacts = pipeline.Artifacts.load(_model_dir(args))
    vessels = load_image(args.vessels, mode="L") if args.vessels else None
    template = to_grayscale(load_image(args.template)) if args.template else None
    report = pipeline.detect(
        args.image, cfg, artifacts, vessel_map=vessels, template=template, dump_dir=args.dump
    )
    _write(args.out, report.to_json(timings=args.timings))
    if not report.od_found:
        log.error("%s: optic disc not found (best score %.3f)", args.image, report.od_score)
        return pipeline.EXIT_NOT_FOUND
    return pipeline.EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    summary, scores, _ = pipeline.evaluate(
        args.dataset, args.annotations, cfg,
        model_dir=_model_dir(args), vessel_dir=args.vessels, reports_dir=args.reports,
    )
    if summary is None:
        log.warning("%s: no annotated images found", args.dataset)
        rows = []
    else:
        rows = [summary]
    if args.summary:
        pipeline.write_summary_csv(args.summary, rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return pipeline.EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    artifacts = None
    if not args.saliency_only:
        artifacts = pipeline.Artifacts.load(_model_dir(args))
    result = pipeline.bench(args.image, cfg, artifacts, args.repeats)
    _write(args.out, json.dumps(result, indent=2, sort_keys=True))
    return pipeline.EXIT_OK


def _parse_range(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise UsageError(f"--param expects name=v1,v2,...; got {text!r}")
    name, values = text.split("=", 1)
    name = name.strip()
    if name not in pipeline.SWEEP_PARAMS:
        raise UsageError(f"cannot sweep {name!r}; choose from {', '.join(sorted(pipeline.SWEEP_PARAMS))}")
    try:
        parsed = [int(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"sweep values for {name} must be integers") from exc
    if not parsed:
        raise UsageError(f"empty sweep range for {name}")
    return name, parsed


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ranges = dict(_parse_range(p) for p in args.param)
    train_crops, train_labels = pipeline.load_training_crops(args.train)
    test_crops, test_labels = pipeline.load_training_crops(args.test)
    rows = pipeline.sweep(train_crops, train_labels, test_crops, test_labels, ranges, cfg)
    if args.out:
        pipeline.write_sweep_csv(args.out, rows)
    for row in rows:
        print(f"{row['param']},{row['value']},{row['accuracy']:.4f}")
    return pipeline.EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.count:
        synthetic.generate_synthetic(args.seed, args.count, out, args.size, degenerated=args.degenerated)
    if args.training_crops:
        cfg = _config(args)
        centres = pipeline.candidate_centres(cfg) if args.hard_negatives else None
        synthetic.write_training_set(args.seed, args.training_crops, out / "train", args.size, negative_centres=centres)
    if not args.count and not args.training_crops:
        raise UsageError("nothing to generate: pass --count and/or --training-crops")
    return pipeline.EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retinal-landmarks", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    modeled = argparse.ArgumentParser(add_help=False)
    modeled.add_argument("--model", help=f"trained artifact directory (default ${CACHE_ENV}/model)")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common, modeled], help="learn codebook, topics and neighbours from crops")
    p.add_argument("crops", help="directory with one folder per class name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common, modeled], help="locate optic disc and fovea in one image")
    p.add_argument("image")
    p.add_argument("--vessels", help="binary vessel map PNG (default: built-in segmenter)")
    p.add_argument("--template", help="healthy macula template image")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--timings", action="store_true", help="include per-stage timings in the report")
    p.add_argument("--dump", metavar="DIR", help="write saliency maps, mask and main-course points here")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common, modeled], help="score detections against annotations")
    p.add_argument("dataset", help="image directory")
    p.add_argument("--annotations", required=True, help="CSV image,od_x,od_y,od_r,fovea_x,fovea_y")
    p.add_argument("--vessels", help="directory of vessel maps named <image-stem>.png")
    p.add_argument("--reports", help="write one JSON report per image here")
    p.add_argument("--summary", help="write the accuracy summary CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", parents=[common, modeled], help="median per-stage wall time")
    p.add_argument("image")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--saliency-only", action="store_true", help="time the saliency stage without a model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=[common], help="accuracy versus Z, K or V on held-out crops")
    p.add_argument("--train", required=True, help="training crop directory")
    p.add_argument("--test", required=True, help="held-out crop directory")
    p.add_argument("--param", action="append", required=True, metavar="NAME=V1,V2", help="n_topics, knn_k or vocab_size")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic fundus images and training crops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=0, help="number of fundus images")
    p.add_argument("--size", type=_size, default=synthetic.DEFAULT_SIZE, help="WIDTHxHEIGHT")
    p.add_argument("--degenerated", action="store_true", help="render maculae with degeneration")
    p.add_argument("--training-crops", type=int, default=0, metavar="N", help="crops per class under OUT/train")
    p.add_argument("--hard-negatives", action="store_true", help="add false saliency candidates as background crops")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help and --version
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return pipeline.EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
