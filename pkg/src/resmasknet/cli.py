"""Command-line entry point: ``resmasknet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import CLASS_NAMES, NUM_CLASSES, SPLITS, batch_iter, class_histogram, image_to_input, parse_fer_csv
from .data import read_image, synthetic_dataset, write_fer_csv
from .errors import ResMaskError
from .evaluate import confusion, ensemble_predict, grad_cam, render_heatmap
from .model import PRESETS, build_network, count_parameters, describe, format_table
from .tensor import precision

log = logging.getLogger("resmasknet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(2)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32", help="scalar type (f64 for verification)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = _Parser(prog="resmasknet", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a network on a FER2013-format CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--mini", action="store_true", help="width-reduced 64x64 preset")
    t.add_argument("--config", help="JSON file of TrainConfig overrides")
    t.add_argument("--no-augment", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix of one checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", default=".")
    e.add_argument("--batch", type=int, default=48)

    en = sub.add_parser("ensemble", parents=[common], help="average softmax over several checkpoints")
    en.add_argument("--data", required=True)
    en.add_argument("--split", choices=SPLITS, default="test")
    en.add_argument("--ckpt", required=True, nargs="+")
    en.add_argument("--out", default=".")
    en.add_argument("--batch", type=int, default=48)

    i = sub.add_parser("infer", parents=[common], help="class probabilities for one image")
    i.add_argument("--image", required=True)
    i.add_argument("--ckpt", required=True)

    g = sub.add_parser("gradcam", parents=[common], help="Grad-CAM overlay for one image")
    g.add_argument("--image", required=True)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--class", dest="klass", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--layer", help="target layer (default: last conv of the final stage)")
    g.add_argument("--fused", action="store_true", help="target the final stage's fused output instead")

    n = sub.add_parser("inspect", parents=[common], help="layer table and parameter count")
    src = n.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--spec", choices=sorted(PRESETS))
    n.add_argument("--backbone-only", action="store_true", help="drop the masking blocks")

    s = sub.add_parser("synth", parents=[common], help="write the synthetic ring dataset as CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=64)
    s.add_argument("--val", type=int, default=64)
    s.add_argument("--test", type=int, default=0)

    st = sub.add_parser("stats", parents=[common], help="per-split class counts")
    st.add_argument("--data", required=True)
    st.add_argument("--out", help="directory for counts CSV and bar chart")
    return ap


def _train_config(args):
    from .train import TrainConfig

    cfg = asdict(TrainConfig())
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        unknown = set(overrides) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ResMaskError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(overrides)
    for flag, key in (("epochs", "max_epochs"), ("batch", "batch_size"), ("lr", "lr0"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    if args.no_augment:
        cfg["augment"] = False
    return TrainConfig(**cfg)


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .train import fit

    cfg = _train_config(args)
    ds = parse_fer_csv(args.data)
    spec = PRESETS["mini" if args.mini else "default"]()
    net = build_network(spec, seed=cfg.seed)
    report = fit(net, ds, cfg, args.out)
    summary = report.to_dict()
    summary["spec"] = spec.to_dict()
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2))
    plot_training_curves(summary["epochs"], Path(args.out) / "training_curves.png")
    print(f"best epoch {report.best_epoch}  val_acc {report.best_val_acc:.4f}  train_acc {report.train_acc:.4f}")
    print(f"checkpoint {report.checkpoint}")
    return 0


def _probabilities(models, ds, split, batch):
    size = models[0].spec.input_size
    probs, labels = [], []
    for x, y in batch_iter(ds, split, batch, size=size):
        probs.append(ensemble_predict(models, x))
        labels.append(y)
    if not probs:
        raise ResMaskError(f"split {split!r} is empty")
    return np.concatenate(probs), np.concatenate(labels)


def _report_eval(models, args) -> int:
    from .plotting import plot_confusion

    ds = parse_fer_csv(args.data)
    probs, labels = _probabilities(models, ds, args.split, args.batch)
    cm = confusion(probs.argmax(axis=1), labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cm.to_csv(out / f"confusion_{args.split}.csv")
    plot_confusion(cm, out / f"confusion_{args.split}.png")
    print(cm.to_text())
    print(f"accuracy {cm.accuracy():.6f} ({int(np.trace(cm.counts))}/{cm.total})")
    return 0


def _load_all(paths):
    models = [load_checkpoint(p) for p in paths]
    ref = models[0].spec
    for p, m in zip(paths, models):
        if m.spec != ref:
            raise ResMaskError(f"{p}: architecture differs from {paths[0]}; ensembles need one input size")
    return models


def cmd_eval(args) -> int:
    return _report_eval(_load_all([args.ckpt]), args)


def cmd_ensemble(args) -> int:
    return _report_eval(_load_all(args.ckpt), args)


def cmd_infer(args) -> int:
    net = load_checkpoint(args.ckpt)
    x = image_to_input(read_image(args.image), net.spec.input_size)
    p = ensemble_predict([net], x)[0]
    for name, v in zip(CLASS_NAMES, p):
        print(f"{name:<9} {v:.8f}")
    print(f"prediction {CLASS_NAMES[int(p.argmax())]}")
    return 0


def cmd_gradcam(args) -> int:
    if not 0 <= args.klass < NUM_CLASSES:
        raise ResMaskError(f"class {args.klass} out of range; valid classes are 0-{NUM_CLASSES - 1}: "
                           + ", ".join(f"{i}={n}" for i, n in enumerate(CLASS_NAMES)))
    net = load_checkpoint(args.ckpt)
    img = read_image(args.image)
    x = image_to_input(img, net.spec.input_size)
    layer = args.layer or (f"stage{len(net.stages)}" if args.fused else None)
    cam = grad_cam(net, x, args.klass, layer)
    render_heatmap(cam, img, args.out)
    print(f"wrote {args.out} ({cam.target_layer}, {cam.heatmap.shape[0]}x{cam.heatmap.shape[1]} map)")
    return 0


def cmd_inspect(args) -> int:
    if args.ckpt:
        net = load_checkpoint(args.ckpt)
        if args.backbone_only and net.spec.masking:
            net = build_network(net.spec.backbone_only())
    else:
        spec = PRESETS[args.spec]()
        net = build_network(spec.backbone_only() if args.backbone_only else spec, seed=args.seed or 0)
    print(format_table(describe(net)))
    total = count_parameters(net)
    print(f"total parameters {total} ({total / 1e6:.2f}x10^6)")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = synthetic_dataset(args.train, args.val, args.test, seed=args.seed or 0)
    write_fer_csv(ds, out)
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def cmd_stats(args) -> int:
    ds = parse_fer_csv(args.data)
    counts = {s: class_histogram(ds, s) for s in SPLITS}
    print("split," + ",".join(CLASS_NAMES) + ",total")
    for s, c in counts.items():
        print(f"{s}," + ",".join(map(str, c)) + f",{int(c.sum())}")
    if args.out:
        from .plotting import plot_class_histogram

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "class_counts.csv", "w") as fh:
            fh.write("split," + ",".join(CLASS_NAMES) + "\n")
            for s, c in counts.items():
                fh.write(f"{s}," + ",".join(map(str, c)) + "\n")
        plot_class_histogram(counts, CLASS_NAMES, out / "class_counts.png")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "infer": cmd_infer,
    "gradcam": cmd_gradcam,
    "inspect": cmd_inspect,
    "synth": cmd_synth,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with precision(args.precision):
            return COMMANDS[args.cmd](args)
    except (ResMaskError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
