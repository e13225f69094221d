"""Command-line surface: gen-data, train, eval, infer, gradcheck, bench.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure.
Precision is selected by the ADAHEAD_PRECISION env var (f32 default);
gradcheck switches itself to f64.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import precision as prec
from .bench import bench
from .data import (DatasetConfig, dataset_categories, generate_dataset,
                   list_split)
from .errors import ConfigError, NumericError, ParseError
from .evaluation import evaluate, write_confusion_csv, write_metrics_csv
from .model import Detector, load_checkpoint, write_tnsr
from .postprocess import write_detections
from .synth import read_labels, read_ppm, resize_bilinear
from .train import TrainConfig, train

# published full-scale results; printed as context, never asserted
REFERENCE_RESULTS = ("reference full-scale results (not reproduced at desk "
                     "scale): mAP@50 0.912, mAP@50-95 0.630, precision 0.860")


def cmd_gen_data(args) -> int:
    config = DatasetConfig.from_file(args.config)
    generate_dataset(config, args.out)
    total = config.train_count + config.val_count
    print(f"wrote {total} scenes ({config.train_count} train / "
          f"{config.val_count} val) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    result = train(config)
    last = result.history[-1]
    print(f"finished {len(result.history)} epochs; "
          f"final total loss {last['total']:.4f}, val mAP@50 {last['val_mAP50']:.4f}")
    print(f"checkpoint: {result.checkpoint}; log: {result.log}")
    print(REFERENCE_RESULTS)
    return 0


def cmd_eval(args) -> int:
    detector, _, _ = load_checkpoint(args.ckpt)
    n_categories = dataset_categories(args.data)
    preds, gts = [], []
    for img_path, lbl_path in list_split(args.data, args.split):
        image = read_ppm(img_path)
        if image.shape[:2] != (detector.config.input_h, detector.config.input_w):
            image = resize_bilinear(image, detector.config.input_h,
                                    detector.config.input_w)
        dets, _ = detector.infer(image, conf_threshold=args.conf,
                                 nms_iou=args.nms)
        preds.append(dets)
        gts.append(read_labels(lbl_path, n_categories))
    report = evaluate(preds, gts, n_categories, ap_mode=args.ap)
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), report)
    write_confusion_csv(os.path.join(args.out, "confusion.csv"), report.confusion)
    for c in report.categories:
        print(f"category {c}: precision {report.precision[c]:.4f} "
              f"recall {report.recall[c]:.4f} ap50 {report.ap50[c]:.4f} "
              f"ap50-95 {report.ap5095[c]:.4f}")
    for note in report.notes:
        print(f"note: {note}")
    print(f"mAP@50 {report.map50:.4f}  mAP@50-95 {report.map5095:.4f}  (--ap {args.ap})")
    print(REFERENCE_RESULTS)
    return 0


def cmd_infer(args) -> int:
    detector, _, _ = load_checkpoint(args.ckpt)
    try:
        image = read_ppm(args.image)
    except OSError as e:
        raise ParseError(f"cannot read image {args.image}: {e}") from None
    if image.shape[:2] != (detector.config.input_h, detector.config.input_w):
        image = resize_bilinear(image, detector.config.input_h,
                                detector.config.input_w)
    dets, attended = detector.infer(image, conf_threshold=args.conf,
                                    nms_iou=args.nms)
    write_detections(args.out, dets)
    if args.dump_features:
        write_tnsr(args.dump_features, attended.data[0])
    print(f"{len(dets)} detections -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    prec.set_precision("f64")
    from .gradsuite import run_suite
    failures = run_suite(args.scope)
    return 2 if failures else 0


def cmd_bench(args) -> int:
    config = TrainConfig.from_file(args.config)
    try:
        n_categories = dataset_categories(config.data_root)
    except (OSError, KeyError):
        n_categories = 3
    from .model import ModelConfig
    model_cfg = ModelConfig(input_h=config.input_h, input_w=config.input_w,
                            n_categories=n_categories)
    report = bench(model_cfg)
    print(f"input {config.input_h}x{config.input_w}, "
          f"{n_categories} categories, FLOPs per image")
    for line in report.lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adahead",
                                     description="detection head toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train from a key=value config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--ap", choices=("paper", "interp"), default="interp")
    p.add_argument("--conf", type=float, default=0.05)
    p.add_argument("--nms", type=float, default=0.45)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run detection on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms", type=float, default=0.45)
    p.add_argument("--out", default="detections.txt")
    p.add_argument("--dump-features", default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=("ops", "head", "loss", "all"),
                   default="all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="parameter and FLOP accounting")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
