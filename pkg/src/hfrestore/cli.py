"""Command line: ``hfrestore {synth,train,eval,restore}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing or malformed files, checkpoint problems), 4 numeric failure.
The ``HF_SEED`` environment variable overrides the configured seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import imageio as IO
from . import losses as L
from . import model as M
from . import train as TR
from . import weather as W
from .errors import CheckpointError, ConfigurationError, NumericError, ParameterError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def env_seed() -> int | None:
    raw = os.environ.get("HF_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"HF_SEED must be an integer, got {raw!r}") from exc


def load_train_config(path) -> TR.TrainConfig:
    cfg = TR.TrainConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        cfg = TR.TrainConfig.from_dict(data)
    seed = env_seed()
    if seed is not None:
        cfg = replace(cfg, seed=seed, net=replace(cfg.net, seed=seed))
    return cfg


def cmd_synth(args) -> int:
    seed = env_seed()
    seed = args.seed if seed is None else seed
    pairs = W.make_dataset(args.count, args.size, args.mix, seed)
    path = IO.write_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {path.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    pairs = IO.load_dataset(args.data)
    size = cfg.net.image_size
    bad = [i for i, p in enumerate(pairs) if p.clean.shape != (3, size, size)]
    if bad:
        raise ShapeError(f"sample {bad[0]} is not {size}x{size}, as the network is configured")
    TR.train(cfg, pairs, out_dir=args.out, resume=args.resume, log=lambda s: print(s, flush=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = M.load(args.checkpoint)
    pairs = IO.load_dataset(args.data)
    print(TR.format_report(TR.evaluate(model, pairs)))
    return EXIT_OK


def cmd_restore(args) -> int:
    model, _, _ = M.load(args.checkpoint)
    img = IO.read_ppm(args.input)
    size = model.cfg.image_size
    if img.shape != (3, size, size):
        raise ShapeError(f"{args.input}: image is {img.shape[2]}x{img.shape[1]}, "
                         f"the checkpoint expects {size}x{size}")
    out = M.restore(model, img)
    IO.write_ppm(args.output, out)
    if args.clean is not None:
        clean = IO.read_ppm(args.clean)
        restored = IO.read_ppm(args.output)
        print(f"psnr_in={L.psnr(img, clean):.4f} psnr_out={L.psnr(restored, clean):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hfrestore", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic degraded/clean dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--mix", default="haze=1,rain=1,snow=1,rain+haze=1",
                   help="comma-separated kind=weight pairs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a synthesized dataset")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--config", help="JSON file of training settings (net settings under 'net')")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM report for a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("restore", help="restore one PPM image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", dest="output", required=True)
    r.add_argument("--clean", help="ground-truth PPM; prints PSNR before and after")
    r.set_defaults(func=cmd_restore)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ParameterError, ShapeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
