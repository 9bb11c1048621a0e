"""Command line: gen-data, train, eval, infer, probe-attn.

Exit status is 0 on success, 1 on file errors, 2 on configuration errors and
3 when training aborts on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import CrackSpec, generate, read_png, split, write_dataset, write_pgm, write_png
from .degconv import restore_theta
from .exceptions import ConfigError, ImageIOError, NumericError, ShapeError
from .net import ModelConfig, load_model
from .ssm import hidden_attention
from .training import TrainConfig, evaluate, train
from .validation import check_images

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_SECTIONS = ("model", "train", "data", "split")

log = logging.getLogger("mixercseg")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}")
    return raw


def _normalise(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    return (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)


def _load_image(path, model) -> np.ndarray:
    img = read_png(path)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return check_images(img, dtype=model.dtype)[0]


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    spec = CrackSpec.from_dict({**cfg.get("data", {}), "seed": args.seed})
    ratios = cfg.get("split", [7, 1, 2])
    samples = generate(spec, args.count, args.size, args.size)
    train_s, val_s, test_s = split(samples, ratios, seed=args.seed)
    write_dataset(args.out, samples, {"train": train_s, "val": val_s, "test": test_s},
                  meta={"spec": spec.to_dict(), "size": args.size, "count": args.count})
    print(f"wrote {len(samples)} samples ({len(train_s)}/{len(val_s)}/{len(test_s)}) to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    model_cfg = ModelConfig.from_dict(cfg.get("model", {}))
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    result = train(model_cfg, args.data, args.out, train_cfg.validate(), seed=args.seed)
    best = max(result.best_miou, 0.0)
    print(f"trained {len(result.log)} epochs, best val mIoU {best:.4f}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    report = evaluate(args.checkpoint, args.data, args.out, split_name=args.split)
    summary = {k: round(report[k], 4) for k in ("miou", "ods", "ois", "f1")}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    model, _ = load_model(args.checkpoint)
    image = _load_image(args.input, model)
    out = Path(args.out)
    logits, aux = model(image, return_aux=True)
    prob = 1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64)))
    stem = Path(args.input).stem
    write_png((prob >= 0.5).astype(np.float32), out / f"{stem}_mask.png")
    write_pgm(prob, out / f"{stem}_prob.pgm")
    if args.dump_theta:
        for i, (info, feat) in enumerate(zip(aux.deg, aux.pyramid), start=1):
            if info is None:
                continue
            theta = restore_theta(info.theta, info.grid, feat.shape[-2:])
            write_png(theta / np.pi, out / f"{stem}_theta_level{i}.png")
    if args.dump_features:
        post = [aux.refined[0].data] + list(aux.fusion.refined)
        pre = [aux.refined[0].data] + list(aux.fusion.upsampled)
        for i, (a, b) in enumerate(zip(pre, post), start=1):
            write_png(_normalise(a.mean(axis=0)), out / f"{stem}_features_level{i}_pre.png")
            write_png(_normalise(b.mean(axis=0)), out / f"{stem}_features_level{i}_post.png")
    print(f"wrote predictions for {args.input} to {out}")
    return EXIT_OK


def cmd_probe_attn(args, cfg) -> int:
    model, _ = load_model(args.checkpoint)
    image = _load_image(args.input, model)
    _, aux = model(image, return_aux=True)
    if not aux.blocks or not aux.blocks[0]:
        raise ConfigError("this checkpoint has no state-space stages to probe")
    if not 1 <= args.stage <= len(aux.blocks):
        raise ConfigError(f"--stage must lie in 1..{len(aux.blocks)}")
    stage = aux.blocks[args.stage - 1]
    if not 0 <= args.block < len(stage):
        raise ConfigError(f"--block must lie in 0..{len(stage) - 1}")
    info = stage[args.block]
    alpha = hidden_attention(info.trace)
    mean_delta = info.trace.mean_delta()
    global_set = set(info.split.g.tolist())
    out = Path(args.out)
    channels = args.channels if args.channels else list(range(alpha.shape[0]))
    records = []
    for c in channels:
        if not 0 <= c < alpha.shape[0]:
            raise ConfigError(f"channel {c} out of range 0..{alpha.shape[0] - 1}")
        heat = np.abs(alpha[c])
        write_png(_normalise(heat), out / f"alpha_stage{args.stage}_block{args.block}_c{c}.png")
        records.append({
            "channel": int(c),
            "mean_delta": float(mean_delta[c]),
            "classified": "global" if c in global_set else "local",
        })
    sidecar = out / f"alpha_stage{args.stage}_block{args.block}.json"
    sidecar.write_text(json.dumps(records, indent=2) + "\n")
    print(f"wrote {len(records)} attention maps to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with model/train/data/split sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixercseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic crack dataset")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--dump-theta", action="store_true", help="write gradient-angle maps")
    p.add_argument("--dump-features", action="store_true", help="write fusion feature means")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("probe-attn", help="render hidden attention of one block")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--channels", type=int, nargs="*")
    p.set_defaults(func=cmd_probe_attn)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, load_config(args.config))
    except (ConfigError, ShapeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageIOError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
