"""Game loss, perceptual loss, and total-loss assembly.

The game loss is the multi-class hinge (multi-margin) loss over the
receiver's unnormalized score vector. The perceptual loss compares
channel-normalized backbone feature maps of the sketch and a target image:
per layer, the squared channel-vector differences are averaged spatially and
weighted; layers are summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import normalize_channels


@dataclass
class LossConfig:
    layer_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    lam: float = 1.0                       # perceptual coefficient
    perceptual_target: str = "matched_photo"  # matched_photo | fixed_image | none
    fixed_image_path: str | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be nonnegative")
        if self.perceptual_target not in ("matched_photo", "fixed_image", "none"):
            raise ValueError(
                f"unknown perceptual target {self.perceptual_target!r}")
        if self.perceptual_target == "fixed_image" and not self.fixed_image_path:
            raise ValueError("fixed_image target needs fixed_image_path")


def multi_margin(scores, target):
    """sum_{j != y} max(0, 1 - x_y + x_j) for a single score vector."""
    scores = ad.as_tensor(scores)
    n = scores.shape[-1]
    if n < 2:
        raise ValueError("multi_margin needs at least 2 scores")
    if not (0 <= target < n):
        raise ValueError(f"target index {target} out of range [0, {n})")
    onehot = np.zeros(n, dtype=scores.dtype)
    onehot[target] = 1.0
    x_y = ad.sum_(scores * ad.as_tensor(onehot, like=scores))
    margins = ad.relu(1.0 - ad.broadcast_to(ad.reshape(x_y, (1,)), (n,)) + scores)
    return ad.sum_(margins * ad.as_tensor(1.0 - onehot, like=scores))


def multi_margin_batch(scores, targets):
    """Mean multi-margin loss over rows of (B, K+1) scores."""
    scores = ad.as_tensor(scores)
    b, n = scores.shape
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise ValueError(f"expected {b} targets, got shape {targets.shape}")
    if (targets < 0).any() or (targets >= n).any():
        raise ValueError("target index out of range")
    onehot = np.zeros((b, n), dtype=scores.dtype)
    onehot[np.arange(b), targets] = 1.0
    oh = ad.as_tensor(onehot, like=scores)
    x_y = ad.sum_(scores * oh, axis=1, keepdims=True)
    margins = ad.relu(1.0 - ad.broadcast_to(x_y, (b, n)) + scores)
    per_game = ad.sum_(margins * ad.as_tensor(1.0 - onehot, like=scores), axis=1)
    return ad.mean(per_game)


def perceptual(stack_a, stack_b, layer_weights):
    """Weighted feature-map distance between two feature stacks.

    Each stack is a list of (N, C_l, H_l, W_l) tensors from the same backbone.
    Per layer: channel-normalize both, take the squared channel-vector
    difference, average over space (and batch), scale by w_l; sum layers.
    """
    if len(stack_a) != len(stack_b):
        raise ValueError("feature stacks differ in length")
    if len(layer_weights) != len(stack_a):
        raise ValueError(
            f"got {len(layer_weights)} layer weights for {len(stack_a)} maps")
    total = None
    for w_l, fa, fb in zip(layer_weights, stack_a, stack_b):
        if tuple(fa.shape) != tuple(fb.shape):
            raise ad.ShapeError(
                f"perceptual: layer shapes differ {fa.shape} vs {fb.shape}")
        diff = normalize_channels(fa) - normalize_channels(fb)
        # sum over channels, mean over batch and space
        term = ad.mean(ad.sum_(ad.square(diff), axis=1)) * float(w_l)
        total = term if total is None else total + term
    return total


def total_loss(scores, targets, sketch_stack, target_stack, cfg: LossConfig):
    """Game loss plus lambda-scaled perceptual term (omitted for target=none)."""
    game = multi_margin_batch(scores, targets)
    if cfg.perceptual_target == "none" or cfg.lam == 0.0:
        return game, game, None
    percep = perceptual(sketch_stack, target_stack, cfg.layer_weights)
    return game + cfg.lam * percep, game, percep


def one_hot_weight_presets(num_layers):
    """Single-layer weighting presets (the per-layer ablation)."""
    eye = np.eye(num_layers)
    return [tuple(row) for row in eye]
