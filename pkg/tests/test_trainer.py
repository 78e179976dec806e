"""Training loop, evaluation, and checkpoint round-trip tests."""

import json
import os

import numpy as np
import pytest

from sketchcomm.autodiff import Adam, Tensor
from sketchcomm.checkpoint import read_checkpoint, write_checkpoint
from sketchcomm.data import SyntheticSpec, gen_synthetic
from sketchcomm.encoder import BackboneConfig
from sketchcomm.game import GameConfig, make_batch, make_rng
from sketchcomm.losses import LossConfig
from sketchcomm.trainer import (Model, TrainConfig, TrainingAborted,
                                config_from_dict, config_to_dict,
                                dump_sketches, evaluate, load,
                                mean_perceptual_distance, replace_stats,
                                run_batch, save, train)

CLASSES = ("circle", "square", "triangle", "cross")


def tiny_cfg(**kw):
    base = dict(
        game=GameConfig(variant="oo_different", distractors=3),
        loss=LossConfig(lam=0.0),
        backbone=BackboneConfig(blocks=((4, 1), (8, 1)), taps=(0, 1),
                                embed_dim=8, resolution=16),
        n_strokes=3, lr=1e-3, epochs=2, seed=0, steps_per_epoch=2,
        eval_interval=1, eval_games=8,
        sender_hidden=(8, 16), receiver_hidden=8, receiver_out=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SyntheticSpec(classes=CLASSES, resolution=16,
                         train_per_class=4, test_per_class=2, seed=0)
    return gen_synthetic(spec)


def _step_once(model, opt, rng, dataset):
    batch = make_batch(model.cfg.game, dataset, rng)
    total, _, _, _, _ = run_batch(model, batch, dataset)
    opt.zero_grad()
    total.backward()
    opt.step()


def test_train_writes_metrics_and_checkpoint(tiny_data, tmp_path):
    train_ds, test_ds = tiny_data
    out = tmp_path / "run"
    model, metrics = train(tiny_cfg(), train_ds, test_ds, out_dir=str(out))
    assert len(metrics) == 2
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1]
    assert all("eval_comm_rate" in json.loads(l) for l in lines)
    assert (out / "ckpt_final.skcm").exists()


def test_checkpoint_roundtrip_bit_identical_next_step(tiny_data, tmp_path):
    train_ds, _ = tiny_data
    cfg = tiny_cfg()
    model = Model(cfg, train_ds.stats)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = make_rng(cfg.seed, stream=0)
    for _ in range(3):
        _step_once(model, opt, rng, train_ds)

    path = str(tmp_path / "ckpt.skcm")
    save(model, opt, 0, rng, path)
    model2, opt2, epoch2, rng2 = load(path)
    assert epoch2 == 0

    named = model.named_parameters()
    named2 = model2.named_parameters()
    for name, p in named.items():
        assert p.data.tobytes() == named2[name].data.tobytes(), name
    for a, b in zip(opt.m + opt.v, opt2.m + opt2.v):
        assert a.tobytes() == b.tobytes()
    assert opt.t == opt2.t

    _step_once(model, opt, rng, train_ds)
    _step_once(model2, opt2, rng2, train_ds)
    for name, p in named.items():
        assert p.data.tobytes() == named2[name].data.tobytes(), name


def test_same_seed_retrain_reproduces_metrics_log(tiny_data, tmp_path):
    train_ds, test_ds = tiny_data
    logs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        train(tiny_cfg(), train_ds, test_ds, out_dir=str(out), log=None)
        logs.append((out / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_nonfinite_loss_aborts_with_dump(tiny_data, tmp_path):
    train_ds, test_ds = tiny_data
    cfg = tiny_cfg()
    model = Model(cfg, train_ds.stats)
    model.named_parameters()["sender.fc0.weight"].data[0, 0] = np.nan
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = make_rng(cfg.seed, stream=0)
    out = tmp_path / "run"
    with pytest.raises(TrainingAborted, match="non-finite"):
        train(cfg, train_ds, test_ds, out_dir=str(out), log=None,
              resume=(model, opt, 0, rng))
    dump = json.loads((out / "aborted_batch.json").read_text())
    assert {"epoch", "step", "sender_targets", "pool",
            "permutation"} <= set(dump)


def test_evaluate_deterministic(tiny_data, tmp_path):
    train_ds, test_ds = tiny_data
    model, _ = train(tiny_cfg(epochs=1), train_ds, log=None)
    a = evaluate(model, test_ds, 12, make_rng(7, stream=3))
    b = evaluate(model, test_ds, 12, make_rng(7, stream=3))
    assert a == b
    assert a["n_games"] >= 12
    assert a["class_comm_rate"] >= a["comm_rate"]


def test_evaluate_rejects_resolution_mismatch(tiny_data):
    train_ds, _ = tiny_data
    model = Model(tiny_cfg(), train_ds.stats)
    spec = SyntheticSpec(classes=CLASSES, resolution=32,
                         train_per_class=2, test_per_class=2, seed=0)
    _, other = gen_synthetic(spec)
    with pytest.raises(ValueError, match="resolution"):
        evaluate(model, other, 4, make_rng(0, stream=3))


def test_cross_dataset_evaluation_runs(tiny_data):
    train_ds, _ = tiny_data
    model, _ = train(tiny_cfg(epochs=1), train_ds, log=None)
    spec = SyntheticSpec(classes=CLASSES, resolution=16,
                         train_per_class=2, test_per_class=2, seed=99)
    _, other = gen_synthetic(spec)
    other = replace_stats(other, model.stats)
    result = evaluate(model, other, 8, make_rng(1, stream=3))
    assert 0.0 <= result["comm_rate"] <= 1.0


def test_frozen_backbone_params_never_move(tiny_data):
    train_ds, _ = tiny_data
    cfg = tiny_cfg(backbone=BackboneConfig(blocks=((4, 1), (8, 1)),
                                           taps=(0, 1), embed_dim=8,
                                           resolution=16, frozen=True))
    model = Model(cfg, train_ds.stats)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()
              if n.startswith("backbone.")}
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = make_rng(0, stream=0)
    batch = make_batch(cfg.game, train_ds, rng)
    total, _, _, _, _ = run_batch(model, batch, train_ds)
    total.backward()
    for name, p in model.named_parameters().items():
        if name.startswith("backbone."):
            assert p.grad is None, name
    opt.step()
    for name, p in model.named_parameters().items():
        if name.startswith("backbone."):
            assert p.data.tobytes() == before[name].tobytes(), name


def test_early_stop_halts_training(tiny_data, tmp_path):
    train_ds, test_ds = tiny_data
    model, metrics = train(tiny_cfg(epochs=5), train_ds, test_ds,
                           log=None, early_stop_comm_rate=0.0)
    assert len(metrics) == 1  # eval every epoch; any rate >= 0.0 stops


def test_config_dict_roundtrip():
    cfg = tiny_cfg()
    assert config_from_dict(config_to_dict(cfg)) == cfg
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


def test_mean_perceptual_distance_finite(tiny_data):
    train_ds, _ = tiny_data
    model = Model(tiny_cfg(), train_ds.stats)
    d = mean_perceptual_distance(model, train_ds, [0, 1, 2])
    assert np.isfinite(d) and d >= 0.0


def test_dump_sketches_outputs(tiny_data, tmp_path):
    from PIL import Image

    train_ds, _ = tiny_data
    model = Model(tiny_cfg(), train_ds.stats)
    written = dump_sketches(model, train_ds.images[:2], str(tmp_path / "s"))
    assert len(written) == 2
    for photo, sketch, strokes in written:
        assert Image.open(photo).size == (16, 16)
        assert Image.open(sketch).size == (16, 16)
        blob = json.loads(open(strokes).read())
        assert blob["primitive"] == "line"
        assert np.asarray(blob["coords"]).shape == (3, 4)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.skcm"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(str(path))


def test_checkpoint_rejects_bad_version(tmp_path):
    path = str(tmp_path / "v.skcm")
    write_checkpoint(path, {}, {"a": np.zeros(2, dtype=np.float32)})
    blob = bytearray(open(path, "rb").read())
    blob[4] = 99
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(path)


def test_checkpoint_preserves_header_and_tensors(tmp_path):
    path = str(tmp_path / "t.skcm")
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3),
               "b": np.asarray(3.5, dtype=np.float32)}
    write_checkpoint(path, {"epoch": 4, "note": "x"}, tensors)
    header, got = read_checkpoint(path)
    assert header["epoch"] == 4 and header["note"] == "x"
    assert header["tensor_names"] == ["w", "b"]
    for name in tensors:
        assert got[name].tobytes() == tensors[name].tobytes()
        assert got[name].shape == tensors[name].shape
