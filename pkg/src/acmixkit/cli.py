"""Command-line entry point: ``acmixkit <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import anchors as anc
from . import data, metrics
from .blocks import rep_forward_train, rep_reparameterize
from .boxes import BBox, Detection
from .model import (DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD, ModelConfig, ModelError, build_model,
                    detect, load_weights, save_weights)
from .selftest import random_rep, run_selftest
from .tensor import ArchiveError, DTYPE, conv2d_direct

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    env = os.environ.get("ACMIXKIT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ACMIXKIT_SEED must be an integer, got {env!r}") from None


def _emit(args, payload: dict, text: str) -> None:
    if args.format in ("text", "both"):
        print(text)
    if args.format in ("json", "both"):
        print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_anchors(args) -> int:
    images = data.load_yolo_labels(args.manifest, exclude_classes=args.exclude_class)
    boxes = data.wh_pixels(images, args.img)
    res = anc.kmeans_cluster(boxes, args.k, args.seed)
    payload = {"seed": args.seed, "k": args.k, "img": args.img, "boxes": len(boxes),
               "mean_iou": round(res.mean_iou, 6), "iterations": res.iterations}
    if args.k == 9:
        aset = anc.assign_anchors(res.centers)
        payload["table"] = anc.anchor_table(aset, args.img)
        table = anc.format_anchor_table(aset, args.img)
    else:
        order = np.argsort(res.centers.prod(axis=1), kind="stable")
        payload["centers"] = [[int(round(w)), int(round(h))] for w, h in res.centers[order]]
        table = "\t".join(f"{w},{h}" for w, h in payload["centers"])
    text = f"{table}\nmean IoU {res.mean_iou:.4f} after {res.iterations} iterations"
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(args, payload, text)
    return EXIT_OK


def cmd_stats(args) -> int:
    images = data.load_yolo_labels(args.manifest, exclude_classes=args.exclude_class)
    stats = data.dataset_stats(images)
    if args.out:
        stats.write_csvs(args.out)
    payload = {"images": len(images), "labels": sum(stats.class_counts.values()),
               "class_counts": {str(k): v for k, v in stats.class_counts.items()}}
    text = "\n".join(f"class {k}\t{v}" for k, v in stats.class_counts.items())
    _emit(args, payload, text)
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = Path(args.manifest)
    lines = [ln for ln in manifest.read_text().splitlines() if ln.strip()]
    train, test = data.split_dataset(lines, args.ratio, args.seed)
    out = Path(args.out or manifest.parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("".join(ln + "\n" for ln in train))
    (out / "test.txt").write_text("".join(ln + "\n" for ln in test))
    _emit(args, {"seed": args.seed, "ratio": args.ratio, "train": len(train), "test": len(test)},
          f"train {len(train)}\ntest {len(test)}")
    return EXIT_OK


def _model_from_args(args):
    if args.weights:
        return load_weights(args.weights)
    return build_model(ModelConfig(num_classes=args.classes, input_size=args.img,
                                   width_multiple=args.width_multiple, seed=args.seed,
                                   spp_pools=tuple(args.spp_pools)))


def cmd_detect(args) -> int:
    model = _model_from_args(args)
    if args.save_weights:
        save_weights(model, args.save_weights)
    images = data.load_yolo_labels(args.manifest)
    lines = []
    for img in images:
        pixels = data.read_pnm(img.path)
        if pixels.shape[0] == 1:
            pixels = np.repeat(pixels, 3, axis=0)
        tensor, scale, pad_x, pad_y = data.letterbox(pixels, model.cfg.input_size)
        tf = data.LetterboxTransform(scale, pad_x, pad_y)
        for d in detect(model, tensor, args.conf, args.iou):
            b = tf.inverse_box(d.bbox)
            b = BBox(max(0.0, b.x1), max(0.0, b.y1), min(float(img.width), b.x2), min(float(img.height), b.y2))
            if b.x2 <= b.x1 or b.y2 <= b.y1:
                continue
            lines.append(json.dumps(Detection(b, d.class_id, d.confidence, img.image_id).to_json(), sort_keys=True))
    body = "".join(ln + "\n" for ln in lines)
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    return EXIT_OK


def read_detections(path: str | Path) -> list[Detection]:
    dets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            dets.append(Detection.from_json(json.loads(line)))
        except (KeyError, TypeError, ValueError) as exc:
            raise data.DataError(f"{path}:{lineno}: bad detection record ({exc})") from None
    return dets


def cmd_eval(args) -> int:
    images = data.load_yolo_labels(args.gts, num_classes=args.classes)
    gts = [g for img in images for g in img.ground_truth()]
    dets = read_detections(args.dets)
    report = metrics.evaluate(dets, gts, args.classes, args.iou, args.iou_mode, args.conf)
    if args.out:
        report.write(args.out)
    payload = report.to_json()
    text = "\n".join([f"class {c}\tAP {ap:.4f}" for c, ap in report.per_class_ap.items()]
                     + [f"mAP@{args.iou}\t{report.map50:.4f}",
                        f"mAP@{'0.5:0.95' if args.iou_mode == 'sweep' else '0.95'}\t{report.map50_95:.4f}"])
    _emit(args, payload, text)
    return EXIT_OK


def cmd_reparam_check(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.trials):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 9))
        p = random_rep(rng, c, c, identity=True)
        x = rng.standard_normal((1, c, 16, 16)).astype(DTYPE)
        diff = float(np.abs(conv2d_direct(x, rep_reparameterize(p)) - rep_forward_train(x, p)).max())
        worst = max(worst, diff)
    ok = worst <= 1e-4
    _emit(args, {"seed": args.seed, "trials": args.trials, "max_abs_diff": worst, "passed": ok},
          f"{'PASS' if ok else 'FAIL'} max |fused - branches| = {worst:.3e} over {args.trials} trials")
    return EXIT_OK if ok else EXIT_DATA


def cmd_bench(args) -> int:
    rows = []
    for wm in args.width_multiple:
        cfg = ModelConfig(num_classes=args.classes, input_size=args.img, width_multiple=wm,
                          seed=args.seed, spp_pools=tuple(args.spp_pools))
        res = metrics.fps_benchmark(build_model(cfg), args.img, args.warmup, args.iters, args.seed)
        rows.append({"width_multiple": wm, "fps": res.fps, "cv": res.cv})
    _emit(args, {"img": args.img, "warmup": args.warmup, "iters": args.iters, "results": rows},
          "\n".join(f"width {r['width_multiple']}\tfps {r['fps']:.2f}\tcv {r['cv']:.3f}" for r in rows))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest()
    payload = {"checks": [r._asdict() for r in results], "passed": all(r.passed for r in results)}
    text = "\n".join(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.detail}" for r in results)
    _emit(args, payload, text)
    return EXIT_OK if payload["passed"] else EXIT_DATA


def cmd_synth(args) -> int:
    manifest = data.synth_fixture_generate(args.n, args.classes, args.seed, args.out,
                                           args.width, args.height, args.max_shapes)
    _emit(args, {"seed": args.seed, "images": args.n, "manifest": str(manifest)}, str(manifest))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acmixkit", description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    seed = _default_seed()

    def add(name, func, help_, formats=("json", "text")):
        p = sub.add_parser(name, help=help_, description=help_,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        p.add_argument("--format", choices=formats, default=formats[0], help="output format")
        p.add_argument("--seed", type=int, default=seed, help="random seed (env ACMIXKIT_SEED)")
        return p

    p = add("anchors", cmd_anchors, "cluster label sizes into anchors with K-means++ under 1 - IoU",
            formats=("both", "json", "text"))
    p.add_argument("--manifest", required=True, help="image/label manifest")
    p.add_argument("--k", type=int, default=9, help="number of clusters")
    p.add_argument("--img", type=int, default=640, help="letterbox size the sizes are measured at")
    p.add_argument("--exclude-class", type=int, action="append", default=[], help="drop labels of this class")
    p.add_argument("--out", help="also write the JSON table to this file")

    p = add("stats", cmd_stats, "class histogram and location/size clouds of a dataset")
    p.add_argument("--manifest", required=True, help="image/label manifest")
    p.add_argument("--exclude-class", type=int, action="append", default=[], help="drop labels of this class")
    p.add_argument("--out", help="directory for the three CSVs")

    p = add("split", cmd_split, "seeded train/test split of a manifest")
    p.add_argument("--manifest", required=True, help="manifest to split")
    p.add_argument("--ratio", type=float, default=0.7, help="train fraction")
    p.add_argument("--out", help="output directory for train.txt/test.txt")

    def model_flags(p):
        p.add_argument("--classes", type=int, default=4, help="number of object classes")
        p.add_argument("--img", type=int, default=640, help="square network input size")
        p.add_argument("--width-multiple", type=float, default=0.25, help="channel width scale")
        p.add_argument("--spp-pools", type=int, nargs=3, default=[5, 9, 13],
                       help="Sppcspc pool sizes; the largest must not exceed img / 32")

    p = add("detect", cmd_detect, "run the detector over a manifest and write JSON-lines detections")
    p.add_argument("--manifest", required=True, help="images to run on")
    model_flags(p)
    p.add_argument("--weights", help="weight archive to load instead of seeded init")
    p.add_argument("--save-weights", help="write the model's weights to this archive")
    p.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD, help="confidence threshold")
    p.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESHOLD, help="NMS IoU threshold")
    p.add_argument("--out", help="JSON-lines output file (stdout when omitted)")

    p = add("eval", cmd_eval, "evaluate JSON-lines detections against a labeled manifest")
    p.add_argument("--dets", required=True, help="JSON-lines detections")
    p.add_argument("--gts", required=True, help="manifest of the ground-truth set")
    p.add_argument("--classes", type=int, default=4, help="number of object classes")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for AP and the confusion matrix")
    p.add_argument("--iou-mode", choices=("sweep", "single"), default="sweep",
                   help="strict mAP as the 0.50:0.95 sweep or at IoU 0.95 alone")
    p.add_argument("--conf", type=float, default=0.0, help="confidence floor for the confusion matrix")
    p.add_argument("--out", help="directory for report.json and CSVs")

    p = add("reparam-check", cmd_reparam_check, "verify Rep branch fusion on random parameters")
    p.add_argument("--trials", type=int, default=50, help="random parameter draws")

    p = add("bench", cmd_bench, "FPS of single-image forward passes")
    p.add_argument("--classes", type=int, default=4, help="number of object classes")
    p.add_argument("--img", type=int, default=160, help="square input size")
    p.add_argument("--width-multiple", type=float, nargs="+", default=[0.25, 0.5, 1.0],
                   help="width multiples to time")
    p.add_argument("--spp-pools", type=int, nargs=3, default=[1, 3, 5], help="Sppcspc pool sizes")
    p.add_argument("--warmup", type=int, default=10, help="untimed passes")
    p.add_argument("--iters", type=int, default=100, help="timed passes")

    add("selftest", cmd_selftest, "run the built-in oracle checks")

    p = add("synth", cmd_synth, "generate a synthetic labeled dataset")
    p.add_argument("--n", type=int, default=200, help="number of images")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--width", type=int, default=64, help="image width")
    p.add_argument("--height", type=int, default=48, help="image height")
    p.add_argument("--max-shapes", type=int, default=4, help="most rectangles per image")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        print(f"config: {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, data.DataError, ArchiveError, ModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
