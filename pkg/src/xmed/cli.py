"""Command-line surface: `xmed train`, `xmed eval`, `xmed explain`.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import data as data_mod
from .errors import XmedError
from .gradcam import explain
from .metrics import evaluate
from .model import build_densenet_mini, build_resnet_mini
from .modelfile import load_model
from .train import TrainConfig, train

BUILDERS = {"resnet-mini": build_resnet_mini,
            "densenet-mini": build_densenet_mini}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="xmed",
        description="Train, evaluate, and explain small CNN image "
                    "classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model and save it")
    src = p_train.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset root with one folder per class")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="generate N synthetic blob samples instead")
    p_train.add_argument("--model", required=True, choices=sorted(BUILDERS))
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--batch", type=int, default=32)
    p_train.add_argument("--lr", type=float, default=1e-4)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--img", type=int, default=64,
                         help="square input size in pixels")
    p_train.add_argument("--no-augment", action="store_true",
                         help="disable training-time augmentation")
    p_train.add_argument("--out", required=True, help="output model file")
    p_train.add_argument("--log", help="JSON-lines training log path")

    p_eval = sub.add_parser("eval", help="score a model on a dataset")
    p_eval.add_argument("--model", required=True)
    src = p_eval.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset root; evaluated in full")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="regenerate the synthetic dataset and score one "
                          "split of it")
    p_eval.add_argument("--seed", type=int, default=0,
                        help="seed for --synthetic regeneration/split")
    p_eval.add_argument("--split", choices=["train", "val", "test"],
                        default="test",
                        help="which synthetic split to score")
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--positive", metavar="NAME",
                        help="positive class name (default: lexicographically "
                             "greatest)")
    p_eval.add_argument("--report", help="write the metrics report JSON here")

    p_exp = sub.add_parser("explain", help="render a Grad-CAM overlay")
    p_exp.add_argument("--model", required=True)
    p_exp.add_argument("--image", required=True, help="input image file")
    p_exp.add_argument("--class", dest="class_index", type=int,
                       help="target class index (default: predicted)")
    p_exp.add_argument("--alpha", type=float, default=0.4)
    p_exp.add_argument("--layer", help="capture layer name override")
    p_exp.add_argument("--out", required=True, help="overlay PNG path")
    p_exp.add_argument("--heatmap", help="also write the bare heatmap PNG")
    return parser


def _load_split_synthetic(n, size, seed):
    dataset = data_mod.generate_synthetic(n, size=size, seed=seed)
    splits = data_mod.split_dataset(dataset, data_mod.SplitSpec(seed=seed))
    return dataset, splits


def _cmd_train(args):
    if args.synthetic is not None:
        dataset, (tr, va, te) = _load_split_synthetic(
            args.synthetic, args.img, args.seed)
    else:
        dataset = data_mod.load_dataset(args.data, (1, args.img, args.img))
        tr, va, te = data_mod.split_dataset(
            dataset, data_mod.SplitSpec(seed=args.seed))
    model = BUILDERS[args.model](num_classes=len(dataset.class_names),
                                 input_shape=dataset.image_size,
                                 seed=args.seed)
    config = TrainConfig(lr0=args.lr, batch_size=args.batch,
                         max_epochs=args.epochs, seed=args.seed,
                         augment=not args.no_augment)
    print(f"training {args.model} on {len(tr)} samples "
          f"({len(va)} validation, {len(te)} held out)", flush=True)
    model, log = train(model, tr.arrays(), va.arrays(), config,
                       checkpoint_path=args.out)
    for entry in log.epochs:
        tags = f"  [{', '.join(entry['events'])}]" if entry["events"] else ""
        print(f"epoch {entry['epoch']:3d}  train {entry['train_loss']:.4f}  "
              f"val {entry['val_loss']:.4f}  acc {entry['val_accuracy']:.3f}  "
              f"lr {entry['lr']:.2e}{tags}")
    if not os.path.exists(args.out):  # e.g. --epochs 0
        from .modelfile import save_model
        save_model(model, args.out)
    if args.log:
        log.write(args.log)
    print(f"saved {args.out}")
    return 0


def _cmd_eval(args):
    model = load_model(args.model)
    if args.synthetic is not None:
        _, splits = _load_split_synthetic(
            args.synthetic, model.input_shape[1], args.seed)
        part = {"train": 0, "val": 1, "test": 2}[args.split]
        subset = splits[part]
        dataset_name = f"synthetic:{args.synthetic}:{args.split}"
    else:
        subset = data_mod.load_dataset(args.data, model.input_shape)
        dataset_name = args.data
    if args.positive is not None:
        if args.positive not in subset.class_names:
            raise XmedError(
                f"--positive {args.positive!r} is not one of "
                f"{subset.class_names}")
        positive = subset.class_names.index(args.positive)
    else:
        positive = len(subset.class_names) - 1
    images, labels = subset.arrays()
    report = evaluate(model, images, labels, threshold=args.threshold,
                      positive_class=positive)
    report.dataset = dataset_name
    report.model = args.model
    body = report.to_dict()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2)
            fh.write("\n")
    auc = body.get("auc")
    print(f"accuracy {body['accuracy_pct']:.2f}%  f1 {body['f1']:.4f}  "
          + (f"auc {auc:.4f}" if auc is not None else "auc n/a")
          + f"  (positive class: {subset.class_names[positive]})")
    return 0


def _cmd_explain(args):
    model = load_model(args.model)
    if args.layer:
        model = model.with_capture(args.layer)
    c, h, w = model.input_shape
    with Image.open(args.image) as img:
        img = img.convert("L" if c == 1 else "RGB")
        if img.size != (w, h):
            img = img.resize((w, h), Image.Resampling.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    image = arr[None] if arr.ndim == 2 else np.moveaxis(arr, 2, 0)
    heat, over = explain(model, image, class_index=args.class_index,
                         alpha=args.alpha)
    Image.fromarray(over.pixels, "RGB").save(args.out)
    if args.heatmap:
        gray = np.floor(heat.values * 255 + 0.5).astype(np.uint8)
        Image.fromarray(gray, "L").save(args.heatmap)
    print(f"class {heat.class_index} via layer {heat.source_layer!r} "
          f"-> {args.out}")
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own usage message
        return int(exc.code or 0)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_explain(args)
    except (XmedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
