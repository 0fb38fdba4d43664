"""Command-line driver: ``segqa {phantom,train,eval,crossval,report,replay}``.

Every command writes ``run_manifest.json`` next to its outputs. The manifest
records the full argument list, so ``segqa replay`` can rerun a command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .datagen import FoldSplit, PhantomSpec, kfold_split, phantom_dataset, write_dataset_manifest
from .errormap import DEFAULT_TAU
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import (
    DivergenceError,
    FoldModels,
    PipelineConfig,
    Scan,
    config_from_dict,
    config_to_dict,
    derive_seed,
    evaluate_fold,
    load_scans,
    predict_error_map,
    run_cross_validation,
    train_fold,
    with_steps,
)
from .models import build_predictor, build_segmentor
from .report import write_error_map, read_metrics_csv, write_report
from .volume import VolumeFormatError, save_grid

log = logging.getLogger("segqa")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGENCE, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
RUN_MANIFEST = "run_manifest.json"
MODEL_FILES = {"seg3d": "seg3d.ckpt", "seg2d": "seg2d.ckpt", "predictor": "predictor.ckpt"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _write_run_manifest(out: Path, args: argparse.Namespace, argv: list[str], **extra) -> None:
    data = {
        "command": args.command,
        "version": __version__,
        "argv": argv,
        "seed": getattr(args, "seed", None),
    }
    data.update(extra)
    (out / RUN_MANIFEST).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_run_manifest(path: Path) -> dict:
    if path.is_dir():
        path = path / RUN_MANIFEST
    _existing_file(str(path), "run manifest")
    return json.loads(path.read_text())


def _config(args) -> PipelineConfig:
    """Defaults, then an optional JSON config file, then individual flags."""
    if args.config:
        data = json.loads(_existing_file(args.config, "config file").read_text())
        config = config_from_dict(data.get("config", data))
    else:
        config = PipelineConfig()
    if args.num_classes is not None:
        config = replace(config, num_classes=args.num_classes)
    for kind, epochs in (("seg3d", args.seg_epochs), ("seg2d", args.seg_epochs),
                         ("predictor", args.predictor_epochs)):
        tc = getattr(config, kind)
        tc = with_steps(tc, args.epochs if epochs is None else epochs, args.steps)
        if args.patch is not None:
            tc = replace(tc, augment=replace(tc.augment, patch_3d=(args.patch,) * 3,
                                             patch_2d=(args.patch,) * 2))
        config = replace(config, **{kind: tc})
    if args.include_gt_masks:
        config = replace(config, include_gt_masks=True)
    if args.tau is not None:
        config = replace(config, tau=args.tau)
    if not 0 < config.tau <= 1:
        raise UsageError(f"--tau must lie in (0, 1], got {config.tau}")
    return config


def _load_scans(manifest: Path, config: PipelineConfig) -> list[Scan]:
    try:
        return load_scans(manifest, config)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _split(scans: list[Scan], folds: int, fold: int | None, seed: int) -> FoldSplit | None:
    if fold is None:
        return None
    if not 2 <= folds <= len(scans):
        raise UsageError(f"--folds must lie in [2, {len(scans)}], got {folds}")
    if not 0 <= fold < folds:
        raise UsageError(f"--fold must lie in [0, {folds}), got {fold}")
    return kfold_split([s.scan_id for s in scans], folds, seed)[fold]


def _save_models(models: FoldModels, out: Path) -> None:
    for kind, name in MODEL_FILES.items():
        save_checkpoint(getattr(models, kind), out / name)
    rows = [[kind, epoch, repr(loss)] for kind in MODEL_FILES for epoch, loss in enumerate(models.histories[kind])]
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Model", "Epoch", "MeanLoss"])
        w.writerows(rows)


def _load_models(config: PipelineConfig, ckpt_dir: Path) -> FoldModels:
    models = {
        "seg3d": build_segmentor(config.net("seg3d")),
        "seg2d": build_segmentor(config.net("seg2d")),
        "predictor": build_predictor(config.net("predictor")),
    }
    for kind, model in models.items():
        path = ckpt_dir / MODEL_FILES[kind]
        if not path.is_file():
            raise UsageError(f"checkpoint not found: {path}")
        load_checkpoint(model, path)
        model.eval()
    return FoldModels(models["seg3d"], models["seg2d"], models["predictor"], {})


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args, argv) -> None:
    if args.n < 1:
        raise UsageError("-n must be positive")
    out = _out_dir(args)
    spec = PhantomSpec(dims=(args.dims,) * 3, num_classes=args.num_classes or 3, noise_sigma=args.noise,
                       seed=args.seed)
    entries = []
    for scan_id, image, gt in phantom_dataset(args.n, spec):
        img_path, gt_path = out / f"{scan_id}_image.vvol", out / f"{scan_id}_gt.vvol"
        save_grid(image, img_path)
        save_grid(gt, gt_path)
        entries.append((scan_id, img_path, gt_path))
    write_dataset_manifest(out / "dataset.tsv", entries)
    _write_run_manifest(out, args, argv, phantom_spec={"dims": list(spec.dims), "num_classes": spec.num_classes,
                                                      "noise_sigma": spec.noise_sigma, "seed": spec.seed},
                        outputs=["dataset.tsv"])
    print(out / "dataset.tsv")


def cmd_train(args, argv) -> None:
    manifest = _existing_file(args.manifest, "dataset manifest")
    config = _config(args)
    scans = _load_scans(manifest, config)
    split = _split(scans, args.folds, args.fold, args.seed)
    train_ids = split.train_ids if split else [s.scan_id for s in scans]
    train = [s for s in scans if s.scan_id in set(train_ids)]
    out = _out_dir(args)
    # same seed as fold ``i`` of a crossval run with this master seed
    fold_seed = derive_seed(args.seed, 99 if split is None else 100 + split.fold)
    models = train_fold(train, config, fold_seed)
    _save_models(models, out)
    _write_run_manifest(out, args, argv, manifest=str(manifest.resolve()), config=config_to_dict(config),
                        fold=args.fold, folds=args.folds, train_ids=list(train_ids),
                        test_ids=list(split.test_ids) if split else [],
                        outputs=sorted(MODEL_FILES.values()) + ["losses.csv"])
    for kind in MODEL_FILES:
        hist = models.histories[kind]
        if hist:
            print(f"{kind}: first epoch loss {hist[0]:.4f}, last {hist[-1]:.4f}")


def cmd_eval(args, argv) -> None:
    ckpt_dir = Path(args.checkpoints)
    train_info = _read_run_manifest(ckpt_dir)
    manifest = _existing_file(args.manifest or train_info.get("manifest", ""), "dataset manifest")
    try:
        config = config_from_dict(train_info["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{ckpt_dir}: run manifest has no usable config ({exc})") from exc
    tau = DEFAULT_TAU if args.tau is None else args.tau
    if not 0 < tau <= 1:
        raise UsageError(f"--tau must lie in (0, 1], got {tau}")
    config = replace(config, tau=tau)
    models = _load_models(config, ckpt_dir)
    scans = _load_scans(manifest, config)
    test_ids = train_info.get("test_ids") or [s.scan_id for s in scans]
    known = {s.scan_id for s in scans}
    missing = [i for i in test_ids if i not in known]
    if missing:
        raise UsageError(f"test scans missing from manifest: {missing}")
    if not train_info.get("test_ids"):
        log.warning("checkpoints were trained on every scan; evaluating on training data")
    test = [s for s in scans if s.scan_id in set(test_ids)]
    out = _out_dir(args)
    report = evaluate_fold(models, test, tau)
    corr = write_report(report, out)
    if args.save_maps:
        _save_error_maps(models, test, tau, out / "error_maps", args.reverse_intensity)
    _write_run_manifest(out, args, argv, manifest=str(manifest.resolve()), checkpoints=str(ckpt_dir.resolve()),
                        config=config_to_dict(config), test_ids=list(test_ids), tau=tau)
    _print_summary(report, corr)


def _save_error_maps(models: FoldModels, scans, tau: float, out: Path, reverse: bool) -> None:
    from .pipeline import generate_masks, gt_records

    out.mkdir(parents=True, exist_ok=True)
    for rec in generate_masks(models.seg3d, models.seg2d, scans) + gt_records(scans):
        scan = next(s for s in scans if s.scan_id == rec.scan_id)
        _, binary, _ = predict_error_map(models.predictor, scan.image, rec.mask, tau)
        stem = out / f"{rec.scan_id}_{rec.mask_type}"
        write_error_map(binary, scan.image.spacing, stem, reverse)


def cmd_crossval(args, argv) -> None:
    manifest = _existing_file(args.manifest, "dataset manifest")
    config = _config(args)
    scans = _load_scans(manifest, config)
    if not 2 <= args.folds <= len(scans):
        raise UsageError(f"--folds must lie in [2, {len(scans)}], got {args.folds}")
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    out = _out_dir(args)

    def save_fold(result):
        fold_dir = out / f"fold_{result.split.fold}"
        fold_dir.mkdir(exist_ok=True)
        _save_models(result.models, fold_dir)
        write_report(result.report, fold_dir)
        (fold_dir / "split.json").write_text(json.dumps(
            {"fold": result.split.fold, "train_ids": list(result.split.train_ids),
             "test_ids": list(result.split.test_ids)}, indent=2) + "\n")
        log.info("fold %d done", result.split.fold)

    result = run_cross_validation(scans, args.folds, config, args.seed, on_fold=save_fold, jobs=args.jobs)
    write_report(result.pooled, out)
    _write_run_manifest(out, args, argv, manifest=str(manifest.resolve()), config=config_to_dict(config),
                        folds=args.folds, jobs=args.jobs)
    _print_summary(result.pooled, result.correlation)


def cmd_report(args, argv) -> None:
    run = Path(args.run)
    metrics_path = _existing_file(str(run / "metrics.csv" if run.is_dir() else run), "metrics CSV")
    report = read_metrics_csv(metrics_path)
    out = _out_dir(args)
    corr = write_report(report, out)
    _write_run_manifest(out, args, argv, source=str(metrics_path.resolve()))
    _print_summary(report, corr)


def cmd_replay(args, argv) -> None:
    info = _read_run_manifest(Path(args.run_manifest))
    old = list(info["argv"])
    if old and old[0] == "replay":
        raise UsageError("refusing to replay a replay")
    if args.out:
        old = _set_out(old, args.out)
    log.info("replaying: %s", " ".join(old))
    code = main(old)
    if code:
        raise SystemExit(code)


def _set_out(argv: list[str], out: str) -> list[str]:
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv + ["--out", out]


def _print_summary(report, corr) -> None:
    print(f"masks: {len(report.rows)}")
    if corr is not None:
        print(f"PCC(QI, Acc) = {corr.pcc_qi_acc:.4f}  PCC(QI, DSC) = {corr.pcc_qi_dsc:.4f}  "
              f"MAE(QI, Acc) = {corr.mae_qi_acc:.4f}")
    for g in report.groups():
        if g.mask_type in ("Overall-auto", "Overall-GT", "GT"):
            print(f"{g.mask_type:<13} DSC={g.dsc:.4f} Acc={g.acc:.4f} Prec={g.prec:.4f} Recl={g.recl:.4f}")


# ---------------------------------------------------------------------------
# argument parsing


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config (or a run manifest) to start from")
    p.add_argument("--epochs", type=int, help="epochs for every model")
    p.add_argument("--seg-epochs", type=int, help="epochs for both segmentors")
    p.add_argument("--predictor-epochs", type=int, help="epochs for the predictor")
    p.add_argument("--steps", type=int, help="steps per epoch")
    p.add_argument("--patch", type=int, help="cubic training patch edge")
    p.add_argument("--num-classes", type=int, help="foreground classes C")
    p.add_argument("--include-gt-masks", action="store_true", help="also feed GT masks to the predictor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segqa", description="Segmentation error maps and quality indicators.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("-n", type=int, default=20)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train both segmentors and the predictor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, help="train on this fold's training split (default: all scans)")
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained checkpoints on their test split")
    p.add_argument("--checkpoints", required=True, help="output directory of a train run")
    p.add_argument("--manifest", help="dataset manifest (default: the one used for training)")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--save-maps", action="store_true", help="write predicted error maps and previews")
    p.add_argument("--reverse-intensity", action="store_true", help="previews draw errors dark, correct light")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold train + eval with pooled report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="rebuild tables, summary and plots from a metrics CSV")
    p.add_argument("--run", required=True, help="metrics.csv or a directory holding one")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="rerun the command recorded in a run manifest")
    p.add_argument("run_manifest")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(f"segqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"segqa {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointError as exc:
        print(f"segqa {args.command}: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, VolumeFormatError, DataError) as exc:
        print(f"segqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
