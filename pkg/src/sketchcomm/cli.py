"""Command-line entry points: gen-data, train, eval, sketch, serve.

Training options live in a hierarchical key-value config file::

    lr = 1e-3
    epochs = 100
    game.variant = oo_different
    game.distractors = 9
    loss.lam = 1.0

Dotted keys address nested config sections; values are parsed as JSON when
possible and fall back to plain strings. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .data import (Dataset, SyntheticSpec, SHAPE_NAMES, compute_stats,
                   gen_synthetic, load_image_dir, write_manifest)
from .game import make_rng
from .trainer import (TrainConfig, config_from_dict, evaluate, load,
                      dump_sketches, replace_stats, train)


def parse_config_text(text):
    """Key-value lines with dotted section paths -> nested dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"line {lineno}: {key!r} conflicts with a scalar")
        node[parts[-1]] = parsed
    return out


def _merge_checked(base, override, path=""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_checked(base[key], value, here)
        else:
            base[key] = value


def load_train_config(path=None):
    """Defaults overlaid with the config file at ``path`` (if given)."""
    merged = asdict(TrainConfig())
    if path is not None:
        with open(path) as f:
            _merge_checked(merged, parse_config_text(f.read()))
    return config_from_dict(merged)


def _add_data_args(p):
    p.add_argument("--data", help="dataset directory with train/ and test/ "
                   "class-subdirectory splits (default: synthetic shapes)")
    p.add_argument("--resolution", type=int, default=48)
    p.add_argument("--train-per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=10)
    p.add_argument("--data-seed", type=int, default=0)


def _load_datasets(args):
    if args.data:
        train_ds = load_image_dir(os.path.join(args.data, "train"),
                                  resolution=args.resolution, split="train")
        test_ds = load_image_dir(os.path.join(args.data, "test"),
                                 resolution=args.resolution, split="test")
        stats = compute_stats(train_ds.images)
        train_ds.stats = stats
        test_ds.stats = stats
        return train_ds, test_ds
    spec = SyntheticSpec(resolution=args.resolution,
                         train_per_class=args.train_per_class,
                         test_per_class=args.test_per_class,
                         seed=args.data_seed)
    return gen_synthetic(spec)


def cmd_gen_data(args):
    from PIL import Image

    classes = tuple(args.classes.split(",")) if args.classes else SHAPE_NAMES
    spec = SyntheticSpec(classes=classes, resolution=args.resolution,
                         train_per_class=args.train_per_class,
                         test_per_class=args.test_per_class, seed=args.seed)
    train_ds, test_ds = gen_synthetic(spec)
    for ds in (train_ds, test_ds):
        counts = {}
        for img, label in zip(ds.images, ds.labels):
            name = ds.class_names[label]
            d = os.path.join(args.out, ds.split, name)
            os.makedirs(d, exist_ok=True)
            i = counts.get(name, 0)
            counts[name] = i + 1
            Image.fromarray(img, mode="RGB").save(
                os.path.join(d, f"{name}_{i:04d}.png"))
    write_manifest(os.path.join(args.out, "manifest.json"),
                   spec, train_ds, test_ds)
    print(f"wrote {len(train_ds)} train + {len(test_ds)} test images to {args.out}")
    return 0


def cmd_train(args):
    cfg = load_train_config(args.config)
    if args.resolution != cfg.backbone.resolution:
        args.resolution = cfg.backbone.resolution
    train_ds, test_ds = _load_datasets(args)
    train(cfg, train_ds, test_ds, out_dir=args.out,
          early_stop_comm_rate=args.early_stop)
    print(f"final checkpoint: {os.path.join(args.out, 'ckpt_final.skcm')}")
    return 0


def cmd_eval(args):
    model, _, epoch, _ = load(args.checkpoint)
    args.resolution = model.cfg.backbone.resolution
    _, test_ds = _load_datasets(args)
    test_ds = replace_stats(test_ds, model.stats)
    result = evaluate(model, test_ds, args.games, make_rng(args.seed, stream=5))
    result["epoch"] = epoch
    print(json.dumps(result, indent=2))
    return 0


def cmd_sketch(args):
    model, _, _, _ = load(args.checkpoint)
    args.resolution = model.cfg.backbone.resolution
    _, test_ds = _load_datasets(args)
    rng = make_rng(args.seed, stream=6)
    idx = rng.choice(len(test_ds), size=min(args.count, len(test_ds)),
                     replace=False)
    dump_sketches(model, test_ds.images[idx], args.out)
    print(f"wrote {len(idx)} photo/sketch pairs to {args.out}")
    return 0


def cmd_serve(args):
    from .service import serve

    serve(bind=args.bind, store_path=args.store, admin_token=args.admin_token)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sketchcomm",
                                description="Emergent sketch communication.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic shape corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", help="comma-separated subset of shape names")
    g.add_argument("--resolution", type=int, default=48)
    g.add_argument("--train-per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train sender and receiver")
    t.add_argument("--config", help="key-value config file")
    t.add_argument("--out", required=True, help="run directory for "
                   "metrics.jsonl and checkpoints")
    t.add_argument("--early-stop", type=float, default=None,
                   help="stop once eval comm rate reaches this value")
    _add_data_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--games", type=int, default=1000)
    e.add_argument("--seed", type=int, default=1)
    _add_data_args(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sketch", help="render photo/sketch pairs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    _add_data_args(s)
    s.set_defaults(func=cmd_sketch)

    v = sub.add_parser("serve", help="run the human-receiver evaluation service")
    v.add_argument("--bind", help="host:port (default env SKETCHCOMM_BIND)")
    v.add_argument("--store", help="event log path (default env "
                   "SKETCHCOMM_STORE_PATH)")
    v.add_argument("--admin-token", help="admin credential (default env "
                   "SKETCHCOMM_ADMIN_TOKEN)")
    v.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
