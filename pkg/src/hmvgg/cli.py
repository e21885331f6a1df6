"""Command-line interface: synth, train, eval, gradcheck, gradcam.

Results go to stdout as ``key=value`` lines; errors go to stderr with exit code 1.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import encode_image, load_manifest, preprocess, read_image, synth_dataset
from .errors import HMVGGError
from .gradcam import LAYER_TAGS, gradcam
from .gradsuite import MODEL_THRESHOLD, OP_THRESHOLD, full_model_check, run_op_suite
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, load_config_file, train_loop, write_history


def _emit(key: str, value) -> None:
    print(f"{key}={value}")


def cmd_synth(args) -> int:
    manifest = synth_dataset(args.out, args.seed, args.per_class, size=args.size)
    _emit("manifest", Path(args.out) / "manifest.txt")
    _emit("samples", len(manifest))
    return 0


def cmd_train(args) -> int:
    if args.config:
        config, train_cfg = load_config_file(args.config)
    else:
        config, train_cfg = ModelConfig.desk(), TrainConfig()
    manifest = load_manifest(args.data)
    result = train_loop(config, manifest, args.seed, args.epochs, train_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, config, result.params)
    history = out.parent / "history.tsv"
    write_history(history, result.history)
    _emit("checkpoint", out)
    _emit("history", history)
    if result.history:
        last = result.history[-1]
        _emit("final_loss", f"{last.loss:.6f}")
        _emit("final_train_accuracy", f"{last.accuracy:.6f}")
    return 0


def cmd_eval(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    metrics = evaluate(params, load_manifest(args.data), config)
    for line in metrics.lines():
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for name, err in run_op_suite(args.seed).items():
        _emit(f"grad.{name}", f"{err:.3e}")
        ok &= err < OP_THRESHOLD
    if args.full_model:
        err = full_model_check(args.seed)
        _emit("grad.full_model", f"{err:.3e}")
        ok &= err < MODEL_THRESHOLD
    _emit("status", "pass" if ok else "fail")
    return 0 if ok else 1


def cmd_gradcam(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    images = [read_image(p) for p in args.image.split(",")]
    x = preprocess(images, config)[None]
    heat = gradcam(params, config, x, args.cls, layer=args.layer)
    Path(args.out).write_bytes(encode_image(heat[0]))
    _emit("heatmap", args.out)
    _emit("peak", f"{float(heat.max()):.6f}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmvgg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic ring dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="manifest file")
    p.add_argument("--config", help="key = value config file (default: desk preset)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--full-model", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap as 8-bit PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="image path, or fundus,oct for six-channel models")
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--layer", default="R5", choices=LAYER_TAGS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HMVGGError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
