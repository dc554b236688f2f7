"""Command-line entry point: ``artifactqc <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import joblib
import numpy as np

from . import metrics
from .core import (
    ArtifactKind,
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    RunConfig,
    Severity,
    load_config,
    validate_config,
)
from .data import (
    SplitError,
    SplitSpec,
    load_manifest,
    load_segmentation_arrays,
    load_severity_arrays,
    make_kfold,
    read_image,
    split_dataset,
    write_manifest,
)

log = logging.getLogger("artifactqc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _csv_words(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    for name in ("optimizer", "model", "epochs", "batch_size", "learning_rate", "width_scale"):
        value = getattr(args, name, None)
        if value is not None:
            config = config.replace(**{name: value})
    config = RunConfig.from_text(config.to_text())  # normalises enum fields
    problems = validate_config(config)
    if problems:
        raise UsageError("invalid config: " + "; ".join(problems))
    return config


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, name):
    if getattr(args, name, None) in (None, ""):
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return getattr(args, name)


def _load_split(path) -> SplitSpec:
    return SplitSpec.from_text(Path(path).read_text(encoding="utf-8"))


def cmd_ingest(args) -> int:
    out = _out_dir(args)
    if args.synthetic:
        from .synthetic import write_segmentation_corpus, write_severity_corpus

        if args.severity:
            manifest = write_severity_corpus(out, args.synthetic, args.size, args.seed or 0)
        else:
            manifest = write_segmentation_corpus(out, args.synthetic, args.size, args.seed or 0, ArtifactKind(args.kind))
    else:
        images = Path(_need(args, "images"))
        entries = []
        masks = Path(args.masks) if args.masks else None
        if args.severity:
            for sev in Severity:
                for p in sorted((images / sev.value).iterdir()) if (images / sev.value).is_dir() else []:
                    if p.suffix.lower() in IMAGE_SUFFIXES:
                        entries.append(ManifestEntry(p.stem, str(p.resolve()), None, sev, ArtifactKind(args.kind)))
        else:
            for p in sorted(images.iterdir()):
                if p.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                mask = None
                if masks is not None:
                    cands = [m for m in masks.glob(p.stem + ".*") if m.suffix.lower() in IMAGE_SUFFIXES]
                    if not cands:
                        raise ManifestError(f"no mask for {p.name} in {masks}")
                    mask = str(cands[0].resolve())
                entries.append(ManifestEntry(p.stem, str(p.resolve()), mask, None, ArtifactKind(args.kind)))
        manifest = DatasetManifest(tuple(entries), out)
    path = write_manifest(manifest, out / "manifest.tsv")
    manifest = load_manifest(path)
    print(json.dumps({"manifest": str(path), "entries": len(manifest), "artifact_kind": manifest.kind_counts, "severity": manifest.severity_counts}, sort_keys=True))
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(_need(args, "manifest"))
    counts = tuple(int(c) for c in args.counts.split(","))
    if len(counts) != 3:
        raise UsageError("--counts takes train,valid,test")
    spec = split_dataset(manifest, counts, args.seed or 0)
    path = _out_dir(args) / "split.tsv"
    path.write_text(spec.to_text(), encoding="utf-8")
    print(json.dumps({"split": str(path), "train": len(spec.train_ids), "valid": len(spec.valid_ids), "test": len(spec.test_ids)}))
    return EXIT_OK


def _seg_arrays(manifest, ids):
    return load_segmentation_arrays(manifest.subset(ids))


def cmd_train_seg(args) -> int:
    from .segmentation import build_model, train_segmenter

    config = _run_config(args)
    manifest = load_manifest(_need(args, "manifest"))
    split = _load_split(_need(args, "split"))
    train = _seg_arrays(manifest, split.train_ids)
    valid = _seg_arrays(manifest, split.valid_ids or split.train_ids)
    model = build_model(config.model, train[0].shape[1:], config.width_scale, seed=config.seed)
    model, history = train_segmenter(model, train, valid, config)
    out = _out_dir(args)
    model.save(out / "model.npz")
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    print(json.dumps({"model": str(out / "model.npz"), "epochs": len(history.records), "stop_reason": history.stop_reason}))
    return EXIT_OK


def cmd_eval_seg(args) -> int:
    from .segmentation import SegModel, evaluate_segmenter

    model = SegModel.load(_need(args, "model"))
    manifest = load_manifest(_need(args, "manifest"))
    ids = _load_split(args.split).test_ids if args.split else manifest.ids
    report = evaluate_segmenter(model, _seg_arrays(manifest, ids), _csv_floats(args.thresholds))
    report.optimizer = args.optimizer or ""
    out = _out_dir(args)
    (out / "metrics.jsonl").write_text(report.to_json_line() + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(metrics.reports_to_csv([report]), encoding="utf-8")
    print(report.to_json_line())
    return EXIT_OK


def cmd_crossval(args) -> int:
    from .segmentation import build_model, evaluate_segmenter, train_segmenter

    config = _run_config(args)
    manifest = load_manifest(_need(args, "manifest"))
    plan = make_kfold(manifest, args.k, config.seed)
    out = _out_dir(args)
    rows, reports = [], []
    for i, split in enumerate(plan.rotations(args.n_valid)):
        train = _seg_arrays(manifest, split.train_ids)
        valid = _seg_arrays(manifest, split.valid_ids or split.train_ids)
        test = _seg_arrays(manifest, split.test_ids)
        model = build_model(config.model, train[0].shape[1:], config.width_scale, seed=config.seed)
        model, _ = train_segmenter(model, train, valid, config)
        report = evaluate_segmenter(model, test, _csv_floats(args.thresholds))
        report.optimizer = config.optimizer.value
        report.extra = {"fold": i + 1, "test_fold": plan.labels[i]}
        reports.append(report)
        others = ", ".join(l for j, l in enumerate(plan.labels) if j != i)
        rows.append([f"Fold {i + 1}", others, plan.labels[i], f"{report.threshold_accuracies[_csv_floats(args.thresholds)[0]]:.6f}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "training_set", "testing_set", f"test_accuracy_iou_{_csv_floats(args.thresholds)[0]:g}"])
    w.writerows(rows)
    (out / "crossval.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "metrics.jsonl").write_text("".join(r.to_json_line() + "\n" for r in reports), encoding="utf-8")
    print(buf.getvalue(), end="")
    return EXIT_OK


def _stratified_split(labels: np.ndarray, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(len(idx) * test_fraction))
        test += idx[:n_test].tolist()
        train += idx[n_test:].tolist()
    return np.sort(train), np.sort(test)


def cmd_train_grid(args) -> int:
    from .severity import BACKBONES, GRID_LOSSES, GRID_OPTIMIZERS, run_grid

    manifest = load_manifest(_need(args, "manifest"))
    X, y = load_severity_arrays(manifest)
    seed = args.seed or 0
    tr, te = _stratified_split(y, args.test_fraction, seed)
    out = _out_dir(args)
    ids = manifest.ids
    (out / "grid_split.tsv").write_text(SplitSpec([ids[i] for i in tr], [], [ids[i] for i in te], seed).to_text(), encoding="utf-8")
    results = run_grid(
        (X[tr], y[tr]),
        (X[te], y[te]),
        backbones=_csv_words(args.backbones) if args.backbones else BACKBONES,
        optimizers=_csv_words(args.optimizers) if args.optimizers else GRID_OPTIMIZERS,
        losses=_csv_words(args.losses) if args.losses else GRID_LOSSES,
        epochs=args.epochs or 25,
        batch_size=args.batch_size or 32,
        learning_rate=args.learning_rate or 1e-4,
        desk_substitute=not args.real_backbones,
        pretrained=args.pretrained,
        seed=seed,
        out_dir=out,
    )
    failed = sum(1 for r in results if r.error)
    print(json.dumps({"results": str(out / "grid_results.csv"), "combinations": len(results), "failed": failed}))
    return EXIT_OK


def cmd_select_bases(args) -> int:
    from .severity import grid_results_from_csv, grid_results_to_csv, select_base_models

    grid = Path(_need(args, "grid"))
    results = grid_results_from_csv(grid.read_text(encoding="utf-8"))
    chosen = select_base_models(results, args.k)
    out = _out_dir(args)
    for r in chosen:
        if r.checkpoint and not Path(r.checkpoint).is_absolute():
            r.checkpoint = str((grid.parent / r.checkpoint).resolve())
    (out / "bases.csv").write_text(grid_results_to_csv(chosen), encoding="utf-8")
    print(grid_results_to_csv(chosen), end="")
    return EXIT_OK


def cmd_stack(args) -> int:
    from .severity import grid_results_from_csv, load_base_models
    from .stacking import META_KINDS, StackedSeverityClassifier, run_stacking_comparison

    bases_csv = Path(_need(args, "bases"))
    ranked = grid_results_from_csv(bases_csv.read_text(encoding="utf-8"))
    bases = load_base_models(ranked, bases_csv.parent)
    manifest = load_manifest(_need(args, "manifest"))
    split = _load_split(_need(args, "split"))
    X_tr, y_tr = load_severity_arrays(manifest.subset(split.train_ids))
    X_te, y_te = load_severity_arrays(manifest.subset(split.test_ids))
    out = _out_dir(args)
    protocol = "leaky" if args.leaky_protocol else "out_of_fold"
    summary = {"protocol": protocol}
    if args.compare:
        table = run_stacking_comparison(bases, (X_tr, y_tr), (X_te, y_te), META_KINDS, protocol=protocol, seed=args.seed or 0)
        (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
        print(table.to_csv(), end="")
    top = bases[: args.top] if args.top else bases
    if args.leaky_protocol:
        stack = StackedSeverityClassifier(top, args.meta, cv=None, seed=args.seed or 0).fit(X_te, y_te)
    else:
        stack = StackedSeverityClassifier(top, args.meta, cv=5, seed=args.seed or 0).fit(X_tr, y_tr)
    joblib.dump(stack, out / "stack.joblib")
    stack.meta_.save(out / "meta_model.joblib")
    summary.update(stack=str(out / "stack.joblib"), test_accuracy=float(np.mean(stack.predict(X_te) == y_te)))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import Policy, emit_report, run_pipeline
    from .segmentation import SegModel

    image = read_image(_need(args, "image"))
    seg_models = {}
    for item in args.seg or []:
        kind, sep, path = item.partition("=")
        if not sep:
            raise UsageError("--seg takes KIND=MODEL.npz")
        seg_models[ArtifactKind(kind)] = SegModel.load(path)
    if not seg_models:
        raise UsageError("at least one --seg KIND=MODEL.npz is required")
    stack = joblib.load(_need(args, "stack"))
    side = args.tile or next(iter(seg_models.values())).input_shape[0]
    policy = Policy(args.trigger)
    report = run_pipeline(
        image,
        seg_models,
        stack,
        policy,
        tile_side=side,
        stride=args.stride,
        kinds=_csv_words(args.kinds) if args.kinds else None,
        slide_id=Path(args.image).stem,
        external_quality_score=args.external_quality,
    )
    emit_report(report, _out_dir(args))
    print(json.dumps({"tiles": len(report.verdicts), **report.counts}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    """Aggregate ``verdicts.jsonl`` and ``metrics.jsonl`` files from earlier runs."""
    counts: dict[str, int] = {}
    reports = []
    for d in args.inputs:
        d = Path(d)
        if not d.is_dir():
            raise ManifestError(f"not a directory: {d}", path=d)
        if (d / "verdicts.jsonl").exists():
            for line in (d / "verdicts.jsonl").read_text(encoding="utf-8").splitlines():
                decision = json.loads(line)["decision"]
                counts[decision] = counts.get(decision, 0) + 1
        if (d / "metrics.jsonl").exists():
            for line in (d / "metrics.jsonl").read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                rec["threshold_accuracies"] = {float(k): v for k, v in rec["threshold_accuracies"].items()}
                reports.append(metrics.SegMetricsReport(**rec))
    out = _out_dir(args)
    (out / "decisions.json").write_text(json.dumps(counts, sort_keys=True) + "\n", encoding="utf-8")
    if reports:
        (out / "metrics_table.csv").write_text(metrics.reports_to_csv(reports), encoding="utf-8")
    print(json.dumps({"decisions": counts, "metric_rows": len(reports)}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key=value run config")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--manifest", help="tile manifest (TSV)")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="artifactqc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[shared], help="build a manifest from image folders or a synthetic corpus")
    p.add_argument("--images", help="tile folder (severity mode: folder with low/mid/high subfolders)")
    p.add_argument("--masks", help="mask folder, files named like their tiles")
    p.add_argument("--kind", default="tissue_fold", choices=[k.value for k in ArtifactKind])
    p.add_argument("--severity", action="store_true", help="ingest severity-labelled tiles")
    p.add_argument("--synthetic", type=int, default=0, help="generate N synthetic tiles (per class with --severity)")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[shared], help="seeded train/valid/test split")
    p.add_argument("--counts", default="480,60,60")
    p.set_defaults(func=cmd_split)

    def training_flags(p):
        p.add_argument("--optimizer", choices=["adam", "adamax", "rmsprop", "sgd"])
        p.add_argument("--model", choices=["double_unet", "resunet_pp", "unet_baseline"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--width-scale", type=float)

    p = sub.add_parser("train-seg", parents=[shared], help="train a segmentation model")
    p.add_argument("--split", help="split.tsv from the split command")
    training_flags(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("eval-seg", parents=[shared], help="score a segmentation checkpoint")
    p.add_argument("--model")
    p.add_argument("--split")
    p.add_argument("--thresholds", default="0.9,0.85")
    p.add_argument("--optimizer", help="label for the report row")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("crossval", parents=[shared], help="k-fold segmentation cross-validation")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--n-valid", type=int, default=60, help="validation ids carved from each training side")
    p.add_argument("--thresholds", default="0.9,0.85")
    training_flags(p)
    p.set_defaults(func=cmd_crossval, optimizer="rmsprop")

    p = sub.add_parser("train-grid", parents=[shared], help="transfer-learning severity grid")
    p.add_argument("--backbones")
    p.add_argument("--optimizers")
    p.add_argument("--losses")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--real-backbones", action="store_true", help="use torchvision/keras backbones instead of desk stand-ins")
    p.add_argument("--pretrained", action="store_true", help="download ImageNet weights for real backbones")
    p.set_defaults(func=cmd_train_grid)

    p = sub.add_parser("select-bases", parents=[shared], help="rank grid results and keep the top k")
    p.add_argument("--grid")
    p.add_argument("--k", type=int, default=6)
    p.set_defaults(func=cmd_select_bases)

    p = sub.add_parser("stack", parents=[shared], help="fit the stacking ensemble / compare meta learners")
    p.add_argument("--bases")
    p.add_argument("--split", help="grid_split.tsv written by train-grid")
    p.add_argument("--meta", default="logistic_regression")
    p.add_argument("--top", type=int, default=0, help="use only the first N bases for the saved stack")
    p.add_argument("--compare", action="store_true", help="write the top-2..top-k x 10 meta learner table")
    p.add_argument("--leaky-protocol", action="store_true", help="fit meta learners on the evaluation split itself")
    p.add_argument("--paper-protocol", dest="leaky_protocol", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("run", parents=[shared], help="tile, segment, grade and decide for one image")
    p.add_argument("--image")
    p.add_argument("--seg", action="append", help="KIND=MODEL.npz, repeatable")
    p.add_argument("--stack", help="stack.joblib from the stack command")
    p.add_argument("--trigger", type=float, default=0.01)
    p.add_argument("--tile", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--kinds")
    p.add_argument("--external-quality", type=float)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[shared], help="aggregate earlier run/eval outputs")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .segmentation.training import TrainingDivergence

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ManifestError, SplitError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
