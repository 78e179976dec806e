"""End-to-end training and evaluation.

One step = one batch of K+1 games sharing a receiver pool: the sender draws
each target, the receiver scores every sketch against the pool, and the
margin loss (plus optional perceptual term) backpropagates through the whole
pipeline, rasterizer included.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .agents import Receiver, Sender, predict, sketch_to_rgb
from .autodiff import Adam, Tensor
from .checkpoint import (read_checkpoint, rng_state_from_json,
                         rng_state_to_json, write_checkpoint)
from .data import NormStats, compute_stats, normalize_images, normalize_raster
from .encoder import Backbone, BackboneConfig
from .game import GameConfig, class_comm_rate, comm_rate, make_batch, make_rng
from .losses import LossConfig, perceptual, total_loss
from .rasterizer import RasterConfig, rasterize, save_png


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    game: GameConfig = field(default_factory=GameConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    primitive: str = "line"
    n_strokes: int = 20
    sigma2: float = 5e-4
    lr: float = 1e-4
    epochs: int = 100
    seed: int = 0
    steps_per_epoch: int | None = None  # default: ceil(N / (K+1))
    eval_interval: int = 5
    eval_games: int = 200
    checkpoint_interval: int = 0  # epochs; 0 = only final
    sender_hidden: tuple = (64, 256)
    receiver_hidden: int = 64
    receiver_out: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def raster_config(self):
        return RasterConfig(self.backbone.resolution, self.backbone.resolution,
                            self.sigma2, self.primitive)


def config_to_dict(cfg: TrainConfig):
    return asdict(cfg)


def config_from_dict(d):
    d = dict(d)
    d["game"] = GameConfig(**d["game"])
    d["loss"] = LossConfig(**{**d["loss"],
                              "layer_weights": tuple(d["loss"]["layer_weights"])})
    bb = dict(d["backbone"])
    bb["blocks"] = tuple(tuple(b) for b in bb["blocks"])
    bb["taps"] = tuple(bb["taps"])
    d["backbone"] = BackboneConfig(**bb)
    d["sender_hidden"] = tuple(d["sender_hidden"])
    if d.get("steps_per_epoch") is not None:
        d["steps_per_epoch"] = int(d["steps_per_epoch"])
    return TrainConfig(**d)


class Model:
    """Shared backbone plus sender and receiver heads."""

    def __init__(self, cfg: TrainConfig, stats: NormStats, init_rng=None):
        if init_rng is None:
            init_rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.stats = stats
        self.backbone = Backbone(cfg.backbone, init_rng)
        self.sender = Sender(self.backbone, cfg.raster_config(),
                             n_strokes=cfg.n_strokes, rng=init_rng,
                             hidden=cfg.sender_hidden)
        self.receiver = Receiver(self.backbone, rng=init_rng,
                                 hidden=cfg.receiver_hidden,
                                 out_dim=cfg.receiver_out)

    def named_parameters(self):
        out = {}
        out.update(self.backbone.params)
        out.update(self.sender.params)
        out.update(self.receiver.params)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def sketch_batch(self, photos_norm):
        """Normalized photos -> (coords, raster, photo taps, photo embeddings)."""
        emb, taps = self.backbone.forward(photos_norm)
        coords = self.sender.strokes_from_embedding(emb)
        raster = rasterize(coords, self.cfg.raster_config())
        return coords, raster, taps, emb


def _fixed_target_stack(model, loss_cfg, batch_size):
    """Feature stack of the configured fixed perceptual target, tiled."""
    from .data import _load_png

    img = _load_png(loss_cfg.fixed_image_path, model.cfg.backbone.resolution)
    x = normalize_images(img[None], model.stats)
    _, taps = model.backbone.forward(Tensor(x))
    return [ad.broadcast_to(t, (batch_size,) + tuple(t.shape[1:]))
            for t in taps]


def run_batch(model, batch, dataset, loss_cfg=None, fixed_stack=None):
    """Forward one game batch; returns (total, game, percep, scores, targets)."""
    loss_cfg = loss_cfg or model.cfg.loss
    stats = model.stats
    sender_imgs = normalize_images(
        dataset.images[np.asarray(batch.sender_targets)], stats)
    pool_imgs = normalize_images(dataset.images[np.asarray(batch.pool)], stats)
    _, raster, sender_taps, sender_emb = model.sketch_batch(Tensor(sender_imgs))
    sketch_norm = normalize_raster(raster, stats)
    sketch_emb, sketch_taps = model.backbone.forward(sketch_norm)
    pool_emb, _ = model.backbone.forward(Tensor(pool_imgs))
    scores = model.receiver.scores(sketch_emb, pool_emb)
    targets = np.asarray(batch.permutation)
    if loss_cfg.perceptual_target == "fixed_image":
        if fixed_stack is None:
            fixed_stack = _fixed_target_stack(model, loss_cfg, len(targets))
        target_stack = fixed_stack
    else:
        target_stack = sender_taps
    total, game, percep = total_loss(scores, targets, sketch_taps,
                                     target_stack, loss_cfg)
    return total, game, percep, scores, targets


def backward_losses(model, game, percep, lam):
    """Backpropagate game + lam * percep with one asymmetry: the perceptual
    term treats the backbone as a fixed feature extractor (its gradients
    reach the sender through the rasterizer but never move backbone
    weights). Otherwise the perceptual term collapses the jointly trained
    feature maps to constants; only the game loss shapes the visual system.
    """
    game.backward()
    if percep is not None and lam:
        backbone_params = list(model.backbone.params.values())
        flags = [p.requires_grad for p in backbone_params]
        for p in backbone_params:
            p.requires_grad = False
        try:
            scaled = percep * lam
            # the perceptual graph shares the sender subgraph with the game
            # graph; drop the game sweep's grads from shared intermediates
            # so they are not pushed into the sender a second time
            scaled.clear_intermediate_grads()
            scaled.backward()
        finally:
            for p, flag in zip(backbone_params, flags):
                p.requires_grad = flag


def train(cfg: TrainConfig, train_ds, test_ds=None, out_dir=None,
          early_stop_comm_rate=None, log=print, resume=None):
    """Train; returns (model, metrics list). Writes checkpoint + metrics log
    to ``out_dir`` when given."""
    if train_ds.stats is None:
        train_ds.stats = compute_stats(train_ds.images)
    if resume is not None:
        model, opt, start_epoch, game_rng = resume
    else:
        model = Model(cfg, train_ds.stats)
        opt = Adam(model.parameters(), lr=cfg.lr)
        start_epoch = 0
        game_rng = make_rng(cfg.seed, stream=0)
    eval_rng_seed = cfg.seed + 1
    k1 = cfg.game.pool_size
    steps = cfg.steps_per_epoch or max(1, int(np.ceil(len(train_ds) / k1)))
    metrics = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        losses, game_losses, percep_losses = [], [], []
        correct = total_games = 0
        for step in range(steps):
            batch = make_batch(cfg.game, train_ds, game_rng)
            total, game, percep, scores, targets = run_batch(
                model, batch, train_ds, cfg.loss)
            if not np.isfinite(total.data):
                if out_dir:
                    with open(os.path.join(out_dir, "aborted_batch.json"),
                              "w") as f:
                        json.dump({"epoch": epoch, "step": step,
                                   "sender_targets": list(batch.sender_targets),
                                   "pool": list(batch.pool),
                                   "permutation": list(batch.permutation)}, f)
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            backward_losses(model, game, percep, cfg.loss.lam)
            opt.step()
            losses.append(float(total.data))
            game_losses.append(float(game.data))
            if percep is not None:
                percep_losses.append(float(percep.data))
            preds = predict(scores)
            correct += int((preds == targets).sum())
            total_games += len(targets)
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "mean_game_loss": float(np.mean(game_losses)),
            "mean_percep_loss": (float(np.mean(percep_losses))
                                 if percep_losses else None),
            "train_comm_rate": correct / total_games,
        }
        do_eval = test_ds is not None and (
            (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1)
        if do_eval:
            ev = evaluate(model, test_ds, cfg.eval_games,
                          make_rng(eval_rng_seed, stream=epoch + 1))
            entry["eval_comm_rate"] = ev["comm_rate"]
            entry["eval_class_comm_rate"] = ev["class_comm_rate"]
            entry["eval_mean_loss"] = ev["mean_loss"]
        metrics.append(entry)
        if metrics_path:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(entry) + "\n")
        if log:
            log(f"epoch {epoch}: loss={entry['mean_loss']:.4f} "
                f"train_comm={entry['train_comm_rate']:.3f}"
                + (f" eval_comm={entry['eval_comm_rate']:.3f}" if do_eval else ""))
        if out_dir and cfg.checkpoint_interval and \
                (epoch + 1) % cfg.checkpoint_interval == 0:
            save(model, opt, epoch + 1, game_rng,
                 os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.skcm"))
        if do_eval and early_stop_comm_rate is not None and \
                entry["eval_comm_rate"] >= early_stop_comm_rate:
            break
    if out_dir:
        save(model, opt, metrics[-1]["epoch"] + 1 if metrics else start_epoch,
             game_rng, os.path.join(out_dir, "ckpt_final.skcm"))
    return model, metrics


def evaluate(model, dataset, n_games, rng, game_cfg=None, loss_cfg=None):
    """Metrics over freshly sampled games; never mutates parameters."""
    game_cfg = game_cfg or model.cfg.game
    loss_cfg = loss_cfg or model.cfg.loss
    if dataset.resolution != model.cfg.backbone.resolution:
        raise ValueError(
            f"dataset resolution {dataset.resolution} does not match the "
            f"checkpoint's {model.cfg.backbone.resolution}")
    if dataset.stats is None:
        dataset = replace_stats(dataset, model.stats)
    k1 = game_cfg.pool_size
    n_batches = max(1, int(np.ceil(n_games / k1)))
    losses, preds_all, targets_all, labels_all = [], [], [], []
    for _ in range(n_batches):
        batch = make_batch(game_cfg, dataset, rng)
        total, _, _, scores, targets = run_batch(model, batch, dataset, loss_cfg)
        losses.append(float(total.data))
        preds_all.extend(predict(scores).tolist())
        targets_all.extend(targets.tolist())
        labels_all.extend([batch.labels] * len(targets))
    result = {
        "comm_rate": comm_rate(preds_all, targets_all),
        "mean_loss": float(np.mean(losses)),
        "n_games": len(preds_all),
    }
    if dataset.labels is not None:
        result["class_comm_rate"] = class_comm_rate(
            preds_all, targets_all, labels_all)
    else:
        result["class_comm_rate"] = None
    return result


def replace_stats(dataset, stats):
    from dataclasses import replace as dc_replace

    return dc_replace(dataset, stats=stats)


def mean_perceptual_distance(model, dataset, indices, target="matched",
                             fixed_image_path=None):
    """Average perceptual distance between sketches and their targets.

    ``target``: "matched" compares each sketch to its source photo;
    "fixed" compares to the image at ``fixed_image_path``.
    """
    imgs = normalize_images(dataset.images[np.asarray(indices)], model.stats)
    _, raster, photo_taps, _ = model.sketch_batch(Tensor(imgs))
    sketch_norm = normalize_raster(raster, model.stats)
    _, sketch_taps = model.backbone.forward(sketch_norm)
    if target == "fixed":
        cfg = LossConfig(layer_weights=model.cfg.loss.layer_weights,
                         perceptual_target="fixed_image",
                         fixed_image_path=fixed_image_path)
        photo_taps = _fixed_target_stack(model, cfg, len(indices))
    w = tuple(1.0 for _ in sketch_taps)
    return float(perceptual(sketch_taps, photo_taps, w).data)


# -- checkpoint glue ------------------------------------------------------------


def save(model, opt, epoch, game_rng, path):
    named = model.named_parameters()
    tensors = {name: p.data for name, p in named.items()}
    for i, name in enumerate(named):
        tensors[f"adam.m.{name}"] = opt.m[i]
        tensors[f"adam.v.{name}"] = opt.v[i]
    header = {
        "config": config_to_dict(model.cfg),
        "stats": model.stats.to_json(),
        "epoch": int(epoch),
        "adam_t": int(opt.t),
        "rng": rng_state_to_json(game_rng),
    }
    write_checkpoint(path, header, tensors)


def load(path):
    """Returns (model, opt, epoch, game_rng) rebuilt bit-exactly."""
    header, tensors = read_checkpoint(path)
    cfg = config_from_dict(header["config"])
    stats = NormStats.from_json(header["stats"])
    model = Model(cfg, stats)
    named = model.named_parameters()
    for name, p in named.items():
        if name not in tensors:
            raise ValueError(f"{path}: missing parameter {name}")
        p.data = tensors[name].astype(np.float32).reshape(p.data.shape)
    opt = Adam(model.parameters(), lr=cfg.lr)
    opt.load_state(header["adam_t"],
                   [tensors[f"adam.m.{n}"] for n in named],
                   [tensors[f"adam.v.{n}"] for n in named])
    game_rng = make_rng(cfg.seed, stream=0)
    game_rng.bit_generator.state = rng_state_from_json(header["rng"])
    return model, opt, header["epoch"], game_rng


def dump_sketches(model, images, out_dir):
    """Write photo/sketch PNG pairs plus stroke coordinate JSON per input."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    imgs = np.asarray(images, dtype=np.uint8)
    norm = normalize_images(imgs, model.stats)
    coords, raster, _, _ = model.sketch_batch(Tensor(norm))
    written = []
    for i in range(len(imgs)):
        photo_path = os.path.join(out_dir, f"photo_{i:03d}.png")
        sketch_path = os.path.join(out_dir, f"sketch_{i:03d}.png")
        strokes_path = os.path.join(out_dir, f"strokes_{i:03d}.json")
        Image.fromarray(imgs[i]).save(photo_path, format="PNG")
        save_png(Tensor(raster.data[i]), sketch_path)
        with open(strokes_path, "w") as f:
            json.dump({"primitive": model.cfg.primitive,
                       "coords": coords.data[i].tolist()}, f)
        written.append((photo_path, sketch_path, strokes_path))
    return written
