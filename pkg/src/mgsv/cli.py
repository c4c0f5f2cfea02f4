"""Command-line entry points: gen-synth / train / eval / predict.

The dataset root comes from --data or the MGSV_DATA_ROOT environment
variable (flag wins). Exit codes: 0 ok, 2 configuration error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .data import SynthConfig, load_split, manifest_path, read_features, synth_generate
from .errors import (ConfigError, DataError, DegenerateSimilarityError,
                     EmptyReductionError, GraphError, NonFiniteError, ShapeError)
from .metrics import write_predictions
from .train import (TrainConfig, Trainer, evaluate_model, model_from_checkpoint,
                    predict_ranking)

DATA_ROOT_ENV = "MGSV_DATA_ROOT"


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def _resolve_data_root(args) -> Path:
    root = getattr(args, "data", None) or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset root: pass --data or set {DATA_ROOT_ENV}")
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    return root


def cmd_gen_synth(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig.from_dict(raw)
    synth_generate(cfg, args.out)
    print(f"synthetic dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    root = _resolve_data_root(args)
    raw = _load_json(args.config) if args.config else {}
    for key in ("epochs", "batch_size", "seed"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    cfg = TrainConfig.from_dict(raw)

    train_manifest, features = load_split(root, "train")
    val_manifest = None
    if manifest_path(root, "val").exists():
        val_manifest, val_features = load_split(root, "val")
        features.update(val_features)

    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, train_manifest, features,
                                          val_manifest, out_dir=args.out)
    else:
        trainer = Trainer(cfg, train_manifest, features, val_manifest, out_dir=args.out)
    summary = trainer.run()
    print(json.dumps({
        "steps": summary["steps"],
        "best_metric": summary["best_metric"],
        "wall_time_sec": round(summary["wall_time_sec"], 2),
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    root = _resolve_data_root(args)
    model, _ = model_from_checkpoint(args.ckpt)
    manifest, features = load_split(root, args.split)
    report, predictions = evaluate_model(model, manifest, features, args.mode)
    if args.report:
        report.save(args.report)
    if args.predictions:
        write_predictions(args.predictions, predictions)
    print(report.to_text())
    return 0


def cmd_predict(args) -> int:
    model, _ = model_from_checkpoint(args.ckpt)
    video = read_features(args.video)
    tracks = [(Path(p).stem, read_features(p)) for p in args.tracks]
    if len(set(tid for tid, _ in tracks)) != len(tracks):
        raise DataError("candidate track files must have distinct names")
    prediction = predict_ranking(model, video, tracks)
    record = prediction.to_record()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgsv",
        description="Video-to-music matching and music-moment grounding harness")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synth", help="generate the synthetic dataset")
    gen.add_argument("--config", help="JSON file with synthesis settings")
    gen.add_argument("--out", required=True, help="output dataset root")
    gen.add_argument("--seed", type=int, help="override the config seed")
    gen.set_defaults(func=cmd_gen_synth)

    tr = sub.add_parser("train", help="train a model on a dataset root")
    tr.add_argument("--data", help=f"dataset root (or {DATA_ROOT_ENV})")
    tr.add_argument("--config", help="JSON file with training settings")
    tr.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", help=f"dataset root (or {DATA_ROOT_ENV})")
    ev.add_argument("--mode", choices=("smg", "msg"), required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--report", help="write the metric table (JSON) here")
    ev.add_argument("--predictions", help="write per-query predictions (JSONL) here")
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="rank candidate tracks for one video")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--video", required=True, help="query video feature file")
    pr.add_argument("--tracks", nargs="+", required=True, help="candidate feature files")
    pr.add_argument("--out", help="write the prediction record here")
    pr.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NonFiniteError, GraphError, DegenerateSimilarityError,
            EmptyReductionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
