"""Referential-game sampling and communication metrics.

Three variants:

* ``original``  — pool drawn without replacement; the receiver target is the
  sender's photo itself.
* ``oo_same``   — pool images have pairwise distinct classes; receiver target
  equals the sender photo.
* ``oo_different`` — like oo_same, but the receiver target is a different
  image of the sender photo's class.

All sampling runs on an explicitly seeded Philox counter-based generator so
that a fixed seed reproduces identical round streams on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("original", "oo_same", "oo_different")


def make_rng(seed, stream=0):
    """Philox-backed generator; distinct streams never share draws."""
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, stream]))


@dataclass(frozen=True)
class GameConfig:
    variant: str = "oo_different"
    distractors: int = 9  # K
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown game variant {self.variant!r}")
        if self.distractors < 1:
            raise ValueError("need at least one distractor")

    @property
    def pool_size(self):
        return self.distractors + 1


@dataclass(frozen=True)
class GameRound:
    sender_target: int          # dataset index shown to the sender
    pool: tuple                 # K+1 dataset indices shown to the receiver
    target_index: int           # position of the receiver target in the pool
    labels: tuple               # class labels of the pool entries (or Nones)


@dataclass(frozen=True)
class GameBatch:
    """K+1 games sharing one receiver pool; sketch i targets pool[perm[i]]."""
    sender_targets: tuple       # dataset indices, one per sketch
    pool: tuple                 # shared K+1 dataset indices
    permutation: tuple          # sketch index -> pool slot
    labels: tuple


def _class_index(dataset):
    if dataset.labels is None:
        raise ValueError("this game variant needs a labeled dataset")
    classes = {}
    for i, c in enumerate(dataset.labels):
        classes.setdefault(int(c), []).append(i)
    return classes


def _check_feasible(cfg, dataset):
    n = len(dataset.images)
    if cfg.variant == "original":
        if cfg.pool_size > n:
            raise ValueError(
                f"original variant needs K+1={cfg.pool_size} <= {n} images")
    else:
        classes = _class_index(dataset)
        if cfg.pool_size > len(classes):
            raise ValueError(
                f"{cfg.variant} needs K+1={cfg.pool_size} <= "
                f"{len(classes)} classes")


def _sample_oo_pool(cfg, dataset, rng, classes):
    class_ids = sorted(classes)
    chosen = rng.choice(len(class_ids), size=cfg.pool_size, replace=False)
    pool = []
    for ci in chosen:
        members = classes[class_ids[ci]]
        pool.append(members[int(rng.integers(len(members)))])
    y = int(rng.integers(cfg.pool_size))
    return pool, y


def _different_instance(dataset, classes, image_idx, rng):
    cls = int(dataset.labels[image_idx])
    members = classes[cls]
    if len(members) < 2:
        raise ValueError(
            f"oo_different is infeasible: class {cls} has a single image")
    while True:
        other = members[int(rng.integers(len(members)))]
        if other != image_idx:
            return other


def sample_round(cfg: GameConfig, dataset, rng) -> GameRound:
    _check_feasible(cfg, dataset)
    if cfg.variant == "original":
        pool = [int(i) for i in
                rng.choice(len(dataset.images), size=cfg.pool_size,
                           replace=False)]
        y = int(rng.integers(cfg.pool_size))
        sender_target = pool[y]
    else:
        classes = _class_index(dataset)
        pool, y = _sample_oo_pool(cfg, dataset, rng, classes)
        if cfg.variant == "oo_same":
            sender_target = pool[y]
        else:
            sender_target = _different_instance(dataset, classes, pool[y], rng)
    labels = tuple(int(dataset.labels[i]) if dataset.labels is not None
                   else None for i in pool)
    return GameRound(sender_target=int(sender_target), pool=tuple(pool),
                     target_index=y, labels=labels)


def make_batch(cfg: GameConfig, dataset, rng) -> GameBatch:
    """One shared pool; a fresh permutation assigns each sketch its target."""
    _check_feasible(cfg, dataset)
    if cfg.variant == "original":
        pool = [int(i) for i in
                rng.choice(len(dataset.images), size=cfg.pool_size,
                           replace=False)]
        classes = None
    else:
        classes = _class_index(dataset)
        pool, _ = _sample_oo_pool(cfg, dataset, rng, classes)
    perm = [int(p) for p in rng.permutation(cfg.pool_size)]
    if cfg.variant == "oo_different":
        senders = [_different_instance(dataset, classes, pool[p], rng)
                   for p in perm]
    else:
        senders = [pool[p] for p in perm]
    labels = tuple(int(dataset.labels[i]) if dataset.labels is not None
                   else None for i in pool)
    return GameBatch(sender_targets=tuple(senders), pool=tuple(pool),
                     permutation=tuple(perm), labels=labels)


def comm_rate(predictions, targets):
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} vs {targets.shape}")
    return float(np.mean(predictions == targets))


def class_comm_rate(predictions, targets, pool_labels):
    """Fraction of rounds where the picked pool entry has the target's class.

    ``pool_labels``: per round, the class labels of the K+1 pool entries.
    """
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} vs {targets.shape}")
    if len(pool_labels) != len(predictions):
        raise ValueError("need one label row per round")
    hits = 0
    for pred, tgt, labels in zip(predictions, targets, pool_labels):
        if labels is None or labels[int(tgt)] is None:
            raise ValueError("class_comm_rate needs pool labels")
        hits += labels[int(pred)] == labels[int(tgt)]
    return hits / len(predictions)


def round_log_line(rnd: GameRound, variant, prediction=None):
    """One JSON line per round for audit logs."""
    return json.dumps({
        "variant": variant,
        "sender_target": rnd.sender_target,
        "pool": list(rnd.pool),
        "target_index": rnd.target_index,
        "labels": list(rnd.labels),
        "prediction": None if prediction is None else int(prediction),
    })
