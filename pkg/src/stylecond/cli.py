"""Command-line entry point: prepare, label, train, generate, evaluate.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence


from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .dataset import (
    CommandTextDetector,
    DatasetError,
    DatasetManifest,
    FixtureTextDetector,
    build_multiresolution,
    filter_text_logos,
    ingest_images,
)
from .evaluation import EvaluationError, ModelSampler, REPORT_NAME, evaluate_model, truncation_sweep
from .features import ToyFeatureExtractor
from .labels import (
    ConditionedDataset,
    LabelError,
    TableWordEmbedder,
    assign_conditions,
    cluster_report,
    feature_points,
    kmeans_cluster,
    word_points,
)
from .model import ModelError
from .training import TrainingDiverged, snapshot_grid, train

logger = logging.getLogger("stylecond")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
VALIDATION_ERRORS = (ConfigError, DatasetError, LabelError, CheckpointError, EvaluationError, ModelError)
RUN_ECHO = "run.json"


class UsageError(ValueError):
    pass


def write_run_echo(directory: Path, command: str, argv: Sequence[str], args: argparse.Namespace, **extra) -> None:
    """Merge this invocation into ``directory/run.json`` under its subcommand name."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RUN_ECHO
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    entry = {
        "argv": ["stylecond", *argv],
        "command_line": shlex.join(["stylecond", *argv]),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
    }
    entry.update(extra)
    data[command] = entry
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- prepare


def cmd_prepare(args, argv) -> int:
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"--in {src} is not a directory")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    manifest = ingest_images(src, out, args.max_res, seed=args.seed, source=args.source)
    detector = None
    if args.ocr_fixture:
        detector = FixtureTextDetector.from_file(args.ocr_fixture)
    elif args.ocr_command:
        detector = CommandTextDetector(shlex.split(args.ocr_command))
    if detector is not None:
        manifest = filter_text_logos(manifest, detector, args.min_chars)
    manifest = build_multiresolution(manifest)
    kept = len(manifest.kept)
    dropped = len(manifest.records) - kept
    write_run_echo(out, "prepare", argv, args)
    print(f"kept {kept}, dropped {dropped}")
    return EXIT_OK


# --------------------------------------------------------------------------- label


def cmd_label(args, argv) -> int:
    manifest = DatasetManifest.load(args.dataset)
    if args.method == "words":
        if not args.words:
            raise UsageError("--words is required for --method words")
        if not args.embeddings:
            raise UsageError("--embeddings is required for --method words")
        for flag, path in (("--words", args.words), ("--embeddings", args.embeddings)):
            if not Path(path).exists():
                raise UsageError(f"{flag} file not found: {path}")
        words = json.loads(Path(args.words).read_text(encoding="utf-8"))
        points = word_points(manifest, words, TableWordEmbedder.from_file(args.embeddings))
        method = "word_midpoint"
    else:
        points = feature_points(manifest, ToyFeatureExtractor(seed=args.feature_seed))
        method = "cnn_embedding"
    assignment = kmeans_cluster(points, args.k, seed=args.seed, max_iter=args.max_iter, tol=args.tol, n_init=args.n_init)
    out = Path(args.out) if args.out else manifest.root
    assign_conditions(manifest, assignment, method, out)
    text, report = cluster_report(points, assignment)
    (out / "cluster_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_run_echo(out, "label", argv, args)
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def _load_labels(manifest: DatasetManifest, labels_dir: Optional[str]) -> ConditionedDataset:
    return ConditionedDataset.load(manifest, labels_dir)


def cmd_train(args, argv) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        config = config.override(key, value)
    if args.seed is not None:
        config = config.override("train.seed", str(args.seed))
    if args.max_steps is not None:
        config = config.override("train.max_steps", str(args.max_steps))
    manifest = DatasetManifest.load(args.dataset)
    if args.unconditional:
        config = config.override("model.num_classes", "null")
        labels = None
    else:
        labels = _load_labels(manifest, args.labels)
    out = Path(args.out)
    result = train(config, manifest, labels, out, resume=args.resume)
    write_run_echo(out, "train", argv, args, config=RunConfig.load(out / "config.json").to_dict())
    print(f"final checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics}")
    return EXIT_OK


# --------------------------------------------------------------------------- generate


def cmd_generate(args, argv) -> int:
    model, state, _ = load_checkpoint(args.ckpt)
    c = model.config.classes
    if args.class_ == "all":
        classes = list(range(c))
    else:
        try:
            k = int(args.class_)
        except ValueError:
            raise UsageError(f"--class must be an integer or 'all', got {args.class_!r}") from None
        if c == 0 or not 0 <= k < c:
            raise UsageError(f"--class {k} out of range for a model with {c} classes")
        classes = [k]
    phase = model.phase if args.phase is None else args.phase
    alpha = model.alpha if args.phase is None else 1.0
    path = snapshot_grid(model.generator, classes, args.n, args.psi, args.seed, args.out, phase, alpha)
    write_run_echo(Path(args.out).parent, "generate", argv, args)
    print(f"wrote {path}")
    return EXIT_OK


# --------------------------------------------------------------------------- evaluate


def _parse_psis(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--sweep expects comma-separated numbers, got {text!r}") from None


def cmd_evaluate(args, argv) -> int:
    model, state, _ = load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(args.dataset)
    labels = _load_labels(manifest, args.labels) if model.config.classes else None
    if labels is not None and labels.k != model.config.classes:
        raise UsageError(f"labels have K={labels.k} but the checkpoint has {model.config.classes} classes")
    sampler = ModelSampler(model, phase=args.phase, psi=args.psi)
    out = Path(args.out) if args.out else Path(args.ckpt)
    out.mkdir(parents=True, exist_ok=True)
    featurizer = ToyFeatureExtractor(seed=args.feature_seed)
    report = evaluate_model(sampler, manifest, labels, featurizer, args.n, args.seed, sampler.resolution,
                            checkpoint=f"{Path(args.ckpt).name}@{state.get('step', 0)}")
    if args.sweep:
        psis = _parse_psis(args.sweep)
        paths = truncation_sweep(model.generator, psis, list(range(model.config.classes)), args.sweep_samples,
                                 args.seed, out, sampler.phase, sampler.alpha)
        report.extra["sweep"] = [p.name for p in paths]
    report.save(out / REPORT_NAME)
    write_run_echo(out, "evaluate", argv, args)
    print(f"fid={report.fid:.6f} is={report.is_score:.6f} n={report.n_samples} report={out / REPORT_NAME}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylecond", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, text-filter and build the resolution pyramid")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-res", type=int, default=32)
    p.add_argument("--min-chars", type=int, default=2)
    p.add_argument("--ocr-fixture", help="JSON {id: text} detections")
    p.add_argument("--ocr-command", help="OCR executable, e.g. 'tesseract {image} stdout'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source", choices=("corpus", "boost", "synthetic"), default="corpus")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("label", help="cluster records into synthetic class-conditions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=("words", "features"), required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--words", help="JSON {id: [words]}")
    p.add_argument("--embeddings", help="word<TAB>v1 v2 ... table")
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--n-init", type=int, default=10, help="seeded k-means++ restarts; lowest inertia wins")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--out", help="directory for labels.csv/clusters.json (default: dataset)")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="progressive conditional training")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", help="directory holding labels.csv (default: dataset)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write a sample grid from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="class_", default="all")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FID / IS report and optional truncation sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase", type=int)
    p.add_argument("--psi", type=float)
    p.add_argument("--sweep", help="comma-separated psi values")
    p.add_argument("--sweep-samples", type=int, default=8)
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
