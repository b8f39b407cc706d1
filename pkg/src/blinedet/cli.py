"""Command-line entry point: ``blinedet <command> [flags]``.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
runtime failures. Every command writes ``run_config.json`` (the resolved
arguments) next to its outputs so that artifacts describe themselves.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

from . import __version__
from .augment import AugmentationPolicy
from .data import build_patient_split
from .errors import BlineError, ValidationError
from .inference import (
    ensemble_predict,
    fuse_decisions,
    read_detections,
    read_predictions,
    write_detections,
    write_predictions,
)
from .metrics import select_threshold, write_report
from .models import LEVELS, ModelCheckpoint
from .phantom import generate_dataset
from .pipeline import detection_report, localization_report, predict_dataset
from .store import LusDataset
from .train import TrainConfig, train, train_cv

logger = logging.getLogger("blinedet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _write_run_config(out_dir: Path, args: argparse.Namespace, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc.update(extra)
    doc["version"] = __version__
    (out_dir / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _open_dataset(path) -> LusDataset:
    return LusDataset.open(Path(path))


def _collect_checkpoints(paths: list[str], level: str | None = None) -> list[ModelCheckpoint]:
    """Accept checkpoint directories or parents holding ``fold*/`` checkpoints."""
    dirs = []
    for p in map(Path, paths):
        if (p / "config.json").exists():
            dirs.append(p)
        else:
            found = sorted(d for d in p.glob("fold*") if (d / "config.json").exists())
            if not found:
                raise ValidationError(f"no checkpoint found at {p}")
            dirs.extend(found)
    return [ModelCheckpoint.load(d, level=level) for d in dirs]


def _write_records(out_dir: Path, records) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / "predictions.jsonl", records)
    if any(r.detections is not None for r in records):
        write_detections(out_dir / "detections.jsonl", records)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    out = Path(args.out)
    ds = generate_dataset(out, args.patients, args.videos_per_patient, args.positive_fraction,
                          args.seed, n_frames=args.frames, duration_s=args.duration, overwrite=args.overwrite)
    _write_run_config(out, args)
    print(f"wrote {len(ds.video_ids)} videos for {len(ds.patients)} patients to {out}")


def cmd_split(args) -> None:
    ds = _open_dataset(args.data)
    split = build_patient_split(ds.patients, args.seed, n_folds=args.folds, test_fraction=args.test_fraction)
    out = Path(args.out) if args.out else Path(args.data) / "split.json"
    split.save(out)
    print(f"test: {len(split.test_patients)} patients; folds: {[len(f) for f in split.folds]}")


def _train_config(args) -> TrainConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "level": args.level, "arch_name": args.arch, "learning_rate": args.lr, "batch_size": args.batch_size,
        "max_epochs": args.epochs, "seed": args.seed, "model_id": args.model_id,
        "max_batches_per_epoch": args.max_batches_per_epoch,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_augment:
        base["augmentation"] = AugmentationPolicy.off()
    for key in ("level", "arch_name"):
        if key not in base:
            raise ValidationError(f"training needs --{key.split('_')[0]} (or a config file providing it)")
    return TrainConfig.from_dict(base)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    ds = _open_dataset(args.data)
    split = ds.load_split()
    out = Path(args.out)
    run_dir = out / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_run_config(run_dir, args)
    if args.cv:
        ckpts, failures = train_cv(cfg, ds, split, out)
        (run_dir / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
        print(f"trained {len(ckpts)} of {len(split.folds)} folds into {run_dir}")
        if not ckpts:
            raise BlineError("every fold failed: " + "; ".join(failures.values()))
    else:
        if not 0 <= args.fold < len(split.folds):
            raise ValidationError(f"--fold must lie in 0..{len(split.folds) - 1}")
        ck = train(cfg, ds, args.fold, split=split, out_dir=run_dir / f"fold{args.fold}")
        print(f"saved {ck.model_id} (best epoch {ck.best_epoch}) to {run_dir / f'fold{args.fold}'}")


def _run_predict(args, ckpts) -> None:
    ds = _open_dataset(args.data)
    records = predict_dataset(ckpts, ds, ds.load_split(), args.aggregation, args.window)
    out = Path(args.out)
    _write_records(out, records)
    _write_run_config(out, args, level=ckpts[0].level, model_id=records[0].model_id,
                      checkpoints=[c.model_id for c in ckpts])
    print(f"wrote {len(records)} predictions to {out / 'predictions.jsonl'}")


def cmd_predict(args) -> None:
    ckpts = _collect_checkpoints([args.checkpoint], args.level)
    if len(ckpts) != 1:
        raise ValidationError("predict takes one checkpoint; use `ensemble` for several")
    _run_predict(args, ckpts)


def cmd_ensemble(args) -> None:
    if args.checkpoints:
        _run_predict(args, _collect_checkpoints(args.checkpoints, args.level))
        return
    if not args.predictions:
        raise ValidationError("ensemble needs --checkpoints or --predictions")
    groups = defaultdict(list)
    for path in args.predictions:
        for r in read_predictions(path):
            groups[(r.partition, r.video_id)].append(r)
    records = []
    for key in sorted(groups, key=lambda k: (k[0] or "", k[1])):
        recs = groups[key]
        if recs[0].level == "pixel":
            raise ValidationError("pixel-level ensembles average heatmaps; pass --checkpoints instead")
        records.append(ensemble_predict(recs))
    out = Path(args.out)
    _write_records(out, records)
    _write_run_config(out, args, level=records[0].level, model_id=records[0].model_id)
    print(f"wrote {len(records)} ensembled predictions to {out / 'predictions.jsonl'}")


def _decisions(path) -> tuple[str, dict[str, int], dict[str, int | None], float]:
    records = read_predictions(path)
    levels = {r.level for r in records}
    if len(levels) != 1:
        raise ValidationError(f"{path} mixes levels {sorted(levels)}")
    val = [r for r in records if r.partition == "val"]
    test = [r for r in records if r.partition == "test"]
    if not val or not test:
        raise ValidationError(f"{path} needs validation and test records")
    t = select_threshold([r.label for r in val], [r.video_score for r in val])
    return (levels.pop(), {r.video_id: int(r.video_score >= t) for r in test},
            {r.video_id: r.label for r in test}, t)


def cmd_fuse(args) -> None:
    if len(args.predictions) != 3:
        raise ValidationError("fuse takes exactly three prediction files (clip, frame, pixel)")
    parts = [_decisions(p) for p in args.predictions]
    levels = [p[0] for p in parts]
    if len(set(levels)) != 3:
        raise ValidationError(f"fuse needs one file per level, got {levels}")
    ids = sorted(parts[0][1])
    for _, dec, _, _ in parts[1:]:
        if sorted(dec) != ids:
            raise ValidationError("prediction files cover different test videos")
    labels = parts[0][2]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, abstained, correct = [], 0, 0
    for vid in ids:
        d = [p[1][vid] for p in parts]
        fused = fuse_decisions(d, args.mode)
        abstained += fused is None
        correct += fused is not None and labels[vid] is not None and fused == labels[vid]
        rows.append([vid, *d, "" if fused is None else fused, int(fused is None), labels[vid]])
    with open(out / "fused.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["video_id", *levels, "fused", "abstain", "label"])
        wr.writerows(rows)
    decided = len(ids) - abstained
    summary = {
        "mode": args.mode,
        "levels": levels,
        "thresholds": {lv: p[3] for lv, p in zip(levels, parts)},
        "n_videos": len(ids),
        "abstention_fraction": abstained / len(ids),
        "accuracy_on_decided": correct / decided if decided else None,
    }
    (out / "fusion.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, args)
    print(f"{args.mode}: {decided}/{len(ids)} decided, abstention {summary['abstention_fraction']:.1%}")


def _data_path_for(pred_path: Path) -> str | None:
    cfg = pred_path.parent / "run_config.json"
    if cfg.exists():
        return json.loads(cfg.read_text()).get("data")
    return None


def cmd_evaluate(args) -> None:
    pred_path = Path(args.predictions)
    records = read_predictions(pred_path)
    if not records:
        raise ValidationError(f"{pred_path} holds no predictions")
    for r in records:
        if abs(r.recompute_score() - r.video_score) > 1e-9:
            raise ValidationError(f"{r.video_id}: stored video_score does not match its unit scores")
    levels = {r.level for r in records}
    models = {r.model_id for r in records}
    if len(levels) != 1 or len(models) != 1:
        raise ValidationError("evaluate expects one model and one level per predictions file")
    det = detection_report(records)

    localization = None
    det_path = Path(args.detections) if args.detections else pred_path.parent / "detections.jsonl"
    if levels == {"pixel"} and det_path.exists():
        data = args.data or _data_path_for(pred_path)
        if data is None:
            raise ValidationError("localization needs --data (annotations) for the detections")
        detections = {v: d for v, d in read_detections(det_path).items() if d.get("partition") in (None, "test")}
        localization = localization_report(detections, _open_dataset(data), args.annotator)
    out = Path(args.out)
    write_report(out, models.pop(), levels.pop(), det, localization)
    _write_run_config(out, args)
    msg = f"AUC {det.auc:.4f}  F1 {det.f1:.4f}  threshold {det.threshold:.4f}"
    if localization:
        msg += "  loc P {:.3f} R {:.3f} F1 {:.3f}".format(*localization)
    print(msg)


def cmd_report(args) -> None:
    docs = [json.loads(Path(p).read_text()) for p in args.reports]
    lines = ["Video-level detection", f"{'model':<32} {'level':<6} {'F1':>6} {'AUC':>6}"]
    for d in sorted(docs, key=lambda d: (d["level"], d["model_id"])):
        lines.append(f"{d['model_id']:<32} {d['level']:<6} {d['f1']:6.3f} {d['auc']:6.3f}")
    loc = [d for d in docs if d.get("localization")]
    if loc:
        lines += ["", "Single-point localization (5 mm)",
                  f"{'model':<32} {'precision':>9} {'recall':>6} {'F1':>6}"]
        for d in sorted(loc, key=lambda d: d["model_id"]):
            lc = d["localization"]
            lines.append(f"{d['model_id']:<32} {lc['precision']:9.3f} {lc['recall']:6.3f} {lc['f1']:6.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blinedet", description="B-line detection and single-point localization")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--patients", type=int, default=20)
    s.add_argument("--videos-per-patient", type=int, default=6)
    s.add_argument("--positive-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=None, help="frames per video (default: fps x duration)")
    s.add_argument("--duration", type=float, default=6.0)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="patient-level test/fold split")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--out", default=None, help="default: <data>/split.json")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one fold or all folds")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="JSON training config; flags override it")
    s.add_argument("--level", choices=LEVELS)
    s.add_argument("--arch")
    s.add_argument("--model-id", default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--max-batches-per-epoch", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--no-augment", action="store_true")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--fold", type=int, default=0)
    g.add_argument("--cv", action="store_true", help="train all five folds")
    s.set_defaults(func=cmd_train)

    for name, helptext in (("predict", "score validation and test videos with one checkpoint"),
                           ("ensemble", "average several fold instances")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=name == "predict")
        s.add_argument("--out", required=True)
        s.add_argument("--level", choices=LEVELS, default=None, help="expected level (checked)")
        s.add_argument("--aggregation", choices=("mean", "max", "max_moving_avg"), default="max")
        s.add_argument("--window", type=int, default=5)
        if name == "predict":
            s.add_argument("--checkpoint", required=True)
            s.set_defaults(func=cmd_predict)
        else:
            s.add_argument("--checkpoints", nargs="+", default=None)
            s.add_argument("--predictions", nargs="+", default=None)
            s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("fuse", help="combine clip, frame and pixel decisions")
    s.add_argument("--predictions", nargs="+", required=True)
    s.add_argument("--mode", choices=("majority", "unanimous"), default="majority")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", help="metrics from persisted predictions")
    s.add_argument("--predictions", required=True)
    s.add_argument("--detections", default=None)
    s.add_argument("--data", default=None, help="dataset with annotations (localization)")
    s.add_argument("--annotator", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="print report tables")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "ensemble" and args.checkpoints and not args.data:
        print("error: ensemble --checkpoints needs --data", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - anything else is a runtime failure
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
