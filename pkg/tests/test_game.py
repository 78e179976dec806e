import numpy as np
import pytest

from sketchcomm.data import Dataset
from sketchcomm.game import (GameConfig, class_comm_rate, comm_rate, make_batch,
                             make_rng, round_log_line, sample_round)


def toy_dataset(n_classes=10, per_class=5, res=8):
    n = n_classes * per_class
    images = np.zeros((n, res, res, 3), dtype=np.uint8)
    images[:, 0, 0, 0] = np.arange(n) % 251  # make images distinguishable
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(images=images, labels=labels,
                   class_names=[str(i) for i in range(n_classes)],
                   split="train")


def check_round_invariants(cfg, rnd, ds):
    assert len(rnd.pool) == cfg.pool_size
    assert 0 <= rnd.target_index < cfg.pool_size
    if cfg.variant in ("original", "oo_same"):
        assert rnd.pool[rnd.target_index] == rnd.sender_target
    if cfg.variant in ("oo_same", "oo_different"):
        assert len(set(rnd.labels)) == cfg.pool_size
    if cfg.variant == "oo_different":
        tgt = rnd.pool[rnd.target_index]
        assert tgt != rnd.sender_target
        assert ds.labels[tgt] == ds.labels[rnd.sender_target]


@pytest.mark.parametrize("variant", ["original", "oo_same", "oo_different"])
def test_round_invariants_sweep(variant):
    ds = toy_dataset()
    cfg = GameConfig(variant=variant, distractors=9)
    rng = make_rng(0)
    for _ in range(500):
        check_round_invariants(cfg, sample_round(cfg, ds, rng), ds)


def test_original_exhaustive_pool():
    ds = toy_dataset(n_classes=2, per_class=5)
    cfg = GameConfig(variant="original", distractors=9)
    rnd = sample_round(cfg, ds, make_rng(1))
    assert sorted(rnd.pool) == list(range(10))


def test_oo_same_covers_all_classes():
    ds = toy_dataset(n_classes=10, per_class=3)
    cfg = GameConfig(variant="oo_same", distractors=9)
    rnd = sample_round(cfg, ds, make_rng(2))
    assert sorted(rnd.labels) == list(range(10))


def test_oo_different_singleton_class_rejected():
    images = np.zeros((3, 8, 8, 3), dtype=np.uint8)
    ds = Dataset(images=images, labels=np.array([0, 1, 1]),
                 class_names=["a", "b"], split="train")
    cfg = GameConfig(variant="oo_different", distractors=1)
    rng = make_rng(3)
    with pytest.raises(ValueError, match="class 0"):
        for _ in range(200):
            sample_round(cfg, ds, rng)


def test_infeasible_pool_sizes():
    ds = toy_dataset(n_classes=3, per_class=2)
    with pytest.raises(ValueError, match="classes"):
        sample_round(GameConfig(variant="oo_same", distractors=5), ds, make_rng(0))
    small = toy_dataset(n_classes=2, per_class=2)
    with pytest.raises(ValueError, match="images"):
        sample_round(GameConfig(variant="original", distractors=9), small,
                     make_rng(0))


def test_batch_structure():
    ds = toy_dataset()
    cfg = GameConfig(variant="oo_different", distractors=9)
    batch = make_batch(cfg, ds, make_rng(4))
    assert len(batch.sender_targets) == 10
    assert sorted(batch.permutation) == list(range(10))
    for i, slot in enumerate(batch.permutation):
        tgt = batch.pool[slot]
        sender = batch.sender_targets[i]
        assert sender != tgt
        assert ds.labels[sender] == ds.labels[tgt]


def test_batch_permutation_resampled():
    ds = toy_dataset()
    cfg = GameConfig(variant="oo_same", distractors=9)
    rng = make_rng(5)
    perms = {make_batch(cfg, ds, rng).permutation for _ in range(10)}
    assert len(perms) > 1


def test_seed_reproducibility():
    ds = toy_dataset()
    cfg = GameConfig(variant="oo_different", distractors=9)
    r1 = [sample_round(cfg, ds, make_rng(7, stream=1)) for _ in range(1)]
    a = [sample_round(cfg, ds, make_rng(7)) for _ in range(50)]
    b = [sample_round(cfg, ds, make_rng(7)) for _ in range(50)]
    assert a == b
    # distinct streams diverge
    c = [sample_round(cfg, ds, make_rng(7, stream=1)) for _ in range(50)]
    assert a != c


def test_comm_rate():
    assert comm_rate([1, 2, 3], [1, 2, 3]) == 1.0
    assert comm_rate([1, 0, 3, 0, 0, 0, 0, 0, 0, 2],
                     [1, 1, 3, 9, 0, 7, 6, 5, 4, 3]) == pytest.approx(0.3)
    with pytest.raises(ValueError, match="mismatch"):
        comm_rate([1], [1, 2])


def test_class_comm_rate():
    labels = [(0, 0, 1)] * 2
    # picked wrong index but same class -> counts
    assert class_comm_rate([1, 2], [0, 2], labels) == 1.0
    # all classes distinct -> equals comm_rate
    distinct = [(0, 1, 2)] * 3
    preds, tgts = [0, 1, 0], [0, 1, 2]
    assert class_comm_rate(preds, tgts, distinct) == comm_rate(preds, tgts)
    with pytest.raises(ValueError, match="labels"):
        class_comm_rate([0], [1], [None])


def test_class_rate_at_least_comm_rate():
    rng = make_rng(11)
    ds = toy_dataset()
    cfg = GameConfig(variant="original", distractors=9)
    preds = rng.integers(0, 10, size=200)
    rounds = [sample_round(cfg, ds, rng) for _ in range(200)]
    tgts = [r.target_index for r in rounds]
    labels = [r.labels for r in rounds]
    assert class_comm_rate(preds, tgts, labels) >= comm_rate(preds, tgts)


def test_round_log_line():
    import json

    ds = toy_dataset()
    cfg = GameConfig(variant="oo_same", distractors=9)
    rnd = sample_round(cfg, ds, make_rng(0))
    rec = json.loads(round_log_line(rnd, cfg.variant, prediction=3))
    assert rec["variant"] == "oo_same"
    assert rec["prediction"] == 3
    assert len(rec["pool"]) == 10
