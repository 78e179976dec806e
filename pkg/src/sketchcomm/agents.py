"""Sender and receiver agents.

The sender maps a photo embedding through a 3-layer MLP (relu, relu, tanh)
to stroke coordinates, then rasterizes them. The receiver maps the sketch
and each candidate photo through the shared visual system and a 2-layer MLP,
scoring candidates by scalar product with the sketch feature.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Backbone, kaiming_uniform
from .rasterizer import RasterConfig, rasterize


def _linear_params(rng, name, n_in, n_out, trainable=True, scale=1.0):
    w = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in) * np.float32(scale),
               requires_grad=trainable, name=f"{name}.weight")
    b = Tensor(np.zeros(n_out, dtype=np.float32),
               requires_grad=trainable, name=f"{name}.bias")
    return w, b


class Sender:
    """embedding -> 64 -> 256 -> coords_per_stroke * n_strokes, tanh-bounded."""

    def __init__(self, backbone: Backbone, raster_cfg: RasterConfig,
                 n_strokes=20, rng=None, hidden=(64, 256)):
        if n_strokes < 0:
            raise ValueError("n_strokes must be >= 0")
        self.backbone = backbone
        self.raster_cfg = raster_cfg
        self.n_strokes = n_strokes
        self.arity = raster_cfg.coords_per_stroke
        dims = [backbone.cfg.embed_dim, *hidden, self.arity * n_strokes]
        self.params = {}
        for i in range(3):
            # damp the tanh layer so initial strokes start near the canvas
            # centre instead of saturating against the borders
            scale = 0.1 if i == 2 else 1.0
            w, b = _linear_params(rng, f"sender.fc{i}", dims[i], dims[i + 1],
                                  scale=scale)
            self.params[w.name] = w
            self.params[b.name] = b

    def parameters(self):
        return list(self.params.values())

    def strokes_from_embedding(self, emb):
        """emb: (B, D) -> coords (B, n_strokes, arity) in [-1, 1]."""
        h = ad.relu(ad.matmul(emb, self.params["sender.fc0.weight"])
                    + self.params["sender.fc0.bias"])
        h = ad.relu(ad.matmul(h, self.params["sender.fc1.weight"])
                    + self.params["sender.fc1.bias"])
        out = ad.tanh(ad.matmul(h, self.params["sender.fc2.weight"])
                      + self.params["sender.fc2.bias"])
        return ad.reshape(out, (emb.shape[0], self.n_strokes, self.arity))

    def forward(self, photos):
        """photos: (B, 3, H, W) normalized -> (StrokeSet coords, raster (B, H, W))."""
        emb = self.backbone.encode(photos)
        coords = self.strokes_from_embedding(emb)
        return coords, rasterize(coords, self.raster_cfg)


class Receiver:
    """Shared-weight match head: f = MLP(encode(.)); scores are dot products."""

    def __init__(self, backbone: Backbone, rng=None, hidden=64, out_dim=64):
        self.backbone = backbone
        self.params = {}
        w0, b0 = _linear_params(rng, "receiver.fc0",
                                backbone.cfg.embed_dim, hidden)
        # keep initial scalar-product scores near the hinge margin's scale
        w1, b1 = _linear_params(rng, "receiver.fc1", hidden, out_dim,
                                scale=0.1)
        for p in (w0, b0, w1, b1):
            self.params[p.name] = p

    def parameters(self):
        return list(self.params.values())

    def match_features(self, emb):
        h = ad.relu(ad.matmul(emb, self.params["receiver.fc0.weight"])
                    + self.params["receiver.fc0.bias"])
        return ad.matmul(h, self.params["receiver.fc1.weight"]) \
            + self.params["receiver.fc1.bias"]

    def scores(self, sketch_emb, photo_embs):
        """(B, D) sketch embeddings vs (K+1, D) pool embeddings -> (B, K+1)."""
        f_sketch = self.match_features(sketch_emb)
        f_photos = self.match_features(photo_embs)
        return ad.matmul(f_sketch, _transpose(f_photos))

    def forward(self, sketch_images, photo_images):
        """Normalized sketch batch (B,3,H,W) and pool (K+1,3,H,W) -> (B, K+1)."""
        if photo_images.shape[0] == 0:
            raise ValueError("receiver needs a non-empty photo set")
        sketch_emb = self.backbone.encode(sketch_images)
        photo_emb = self.backbone.encode(photo_images)
        return self.scores(sketch_emb, photo_emb)


def _transpose(t):
    # 2-D transpose built from reshape-free numpy view with its own backward
    out_data = t.data.T.copy()

    def backward(g):
        t._accumulate(g.T)

    return ad._make(out_data, (t,), backward)


def predict(scores):
    """Argmax per row with lowest-index tie-break (numpy argmax semantics)."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return np.argmax(s, axis=-1)


def sketch_to_rgb(raster):
    """Replicate a greyscale raster (..., H, W) to 3 channels (..., 3, H, W)."""
    lead = raster.shape[:-2]
    h, w = raster.shape[-2:]
    flatshape = lead + (1, h, w)
    one = ad.reshape(raster, flatshape)
    return ad.concat([one, one, one], axis=len(lead))
