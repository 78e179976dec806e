"""Shared convolutional "early visual system".

A small trainable backbone of conv blocks, each ending in a 2x max-pool.
It supplies two things from a single forward pass per image batch:

* tapped post-relu feature maps (one per configured block, taken just before
  that block's pool) used by the perceptual loss, and
* a flattened, linearly projected fixed-size embedding used by both agents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_BLOCKS = ((16, 2), (32, 2), (64, 2), (64, 2))


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple = DEFAULT_BLOCKS  # (out_channels, conv_count) per block
    taps: tuple = (0, 1, 2, 3)      # block indices feeding the feature stack
    embed_dim: int = 64
    frozen: bool = False
    resolution: int = 48
    in_channels: int = 3

    def __post_init__(self):
        if not (1 <= len(self.taps) <= len(self.blocks)):
            raise ValueError("need 1 <= L <= number of blocks taps")
        if sorted(self.taps) != list(self.taps) or len(set(self.taps)) != len(self.taps):
            raise ValueError("taps must be strictly increasing block indices")
        if any(t < 0 or t >= len(self.blocks) for t in self.taps):
            raise ValueError("tap index out of range")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        size = self.resolution
        for _ in self.blocks:
            if size < 2 or size % 2 != 0:
                raise ValueError(
                    f"resolution {self.resolution} incompatible with "
                    f"{len(self.blocks)} pooling blocks")
            size //= 2

    @property
    def num_taps(self):
        return len(self.taps)

    @property
    def final_spatial(self):
        return self.resolution // (2 ** len(self.blocks))

    @property
    def flat_dim(self):
        return self.final_spatial ** 2 * self.blocks[-1][0]


def kaiming_uniform(rng, shape, fan_in):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Backbone:
    """Conv blocks + projection head with named parameters."""

    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        self.params = {}
        trainable = not cfg.frozen
        in_ch = cfg.in_channels
        for bi, (out_ch, n_convs) in enumerate(cfg.blocks):
            for ci in range(n_convs):
                fan_in = in_ch * 9
                w = Tensor(kaiming_uniform(rng, (out_ch, in_ch, 3, 3), fan_in),
                           requires_grad=trainable,
                           name=f"backbone.block{bi}.conv{ci}.weight")
                b = Tensor(np.zeros(out_ch, dtype=np.float32),
                           requires_grad=trainable,
                           name=f"backbone.block{bi}.conv{ci}.bias")
                self.params[w.name] = w
                self.params[b.name] = b
                in_ch = out_ch
        w = Tensor(kaiming_uniform(rng, (cfg.flat_dim, cfg.embed_dim),
                                   cfg.flat_dim),
                   requires_grad=trainable, name="backbone.proj.weight")
        b = Tensor(np.zeros(cfg.embed_dim, dtype=np.float32),
                   requires_grad=trainable, name="backbone.proj.bias")
        self.params[w.name] = w
        self.params[b.name] = b
        self.forward_count = 0  # instrumentation: one bump per batch forward

    def parameters(self):
        return list(self.params.values())

    def forward(self, x):
        """x: (N, C, H, W) normalized images -> (embedding (N, D), taps list).

        One backbone pass serves both the embedding and the feature stack.
        """
        if x.shape[-1] != self.cfg.resolution or x.shape[-2] != self.cfg.resolution:
            raise ad.ShapeError(
                f"backbone expects {self.cfg.resolution}px inputs, got {x.shape}")
        self.forward_count += 1
        taps = []
        h = x
        for bi, (out_ch, n_convs) in enumerate(self.cfg.blocks):
            for ci in range(n_convs):
                w = self.params[f"backbone.block{bi}.conv{ci}.weight"]
                b = self.params[f"backbone.block{bi}.conv{ci}.bias"]
                h = ad.relu(ad.conv2d(h, w, b, stride=1, pad=1))
            if bi in self.cfg.taps:
                taps.append(h)  # post-relu, pre-pool
            h = ad.maxpool2d(h, 2)
        n = h.shape[0]
        flat = ad.reshape(h, (n, self.cfg.flat_dim))
        emb = ad.matmul(flat, self.params["backbone.proj.weight"]) + \
            self.params["backbone.proj.bias"]
        return emb, taps

    def encode(self, x):
        return self.forward(x)[0]

    def feature_stack(self, x):
        return self.forward(x)[1]


def normalize_channels(fmap, axis=1, eps=1e-10):
    """Unit-normalize feature vectors along the channel axis (eps-guarded)."""
    return ad.channel_norm(fmap, axis=axis, eps=eps)
