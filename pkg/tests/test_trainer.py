import numpy as np
import pytest

from mobiletl.model import FormatError, ModelSpec, build_model
from mobiletl.policy import TrainPolicy, apply_policy
from mobiletl.trainer import (
    DatasetHandle, OptimizerCfg, OptimizerState, cosine_lr, evaluate,
    load_dataset, optimizer_step, save_dataset, split_train_eval,
    synthetic_blobs, train,
)
from conftest import block


def small_spec(classes=3):
    return ModelSpec(input_shape=(4, 3, 12, 12),
                     blocks=[block(kind="conv", in_ch=3, out_ch=8)],
                     num_classes=classes)


def test_optimizer_cfg_validation():
    with pytest.raises(ValueError):
        OptimizerCfg(kind="rmsprop", lr=1e-3)
    with pytest.raises(ValueError):
        OptimizerCfg(kind="sgd", lr=-1.0)
    with pytest.raises(ValueError):
        OptimizerCfg(kind="sgd", lr=1e-3, schedule="warm")


def test_cosine_lr_endpoints():
    cfg = OptimizerCfg(kind="sgd", lr=1.0, schedule="cosine",
                       total_steps=100, lr_min=0.1)
    assert cosine_lr(0, cfg) == pytest.approx(1.0)
    assert cosine_lr(100, cfg) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        cosine_lr(101, cfg)


def test_sgd_step_matches_hand_update():
    p = {"w": np.array([1.0, 2.0], dtype=np.float32)}
    g = {"w": np.array([0.5, -1.0], dtype=np.float32)}
    state = OptimizerState()
    optimizer_step(p, g, state, OptimizerCfg(kind="sgd", lr=0.1,
                                             momentum=0.0))
    np.testing.assert_allclose(p["w"], [0.95, 2.1], rtol=1e-6)


def test_sgd_momentum_accumulates():
    p = {"w": np.zeros(1, dtype=np.float32)}
    state = OptimizerState()
    cfg = OptimizerCfg(kind="sgd", lr=1.0, momentum=0.9)
    g = {"w": np.ones(1, dtype=np.float32)}
    optimizer_step(p, g, state, cfg)   # v=1, w=-1
    optimizer_step(p, g, state, cfg)   # v=1.9, w=-2.9
    np.testing.assert_allclose(p["w"], [-2.9], rtol=1e-6)


def test_adam_first_step_is_lr_scaled_sign():
    p = {"w": np.array([1.0, -1.0], dtype=np.float32)}
    g = {"w": np.array([0.3, -0.7], dtype=np.float32)}
    state = OptimizerState()
    optimizer_step(p, g, state, OptimizerCfg(kind="adam", lr=0.01))
    # bias-corrected first step moves each weight by ~lr against the sign
    np.testing.assert_allclose(p["w"], [1.0 - 0.01, -1.0 + 0.01], atol=1e-4)


def test_dataset_round_trip(tmp_path):
    ds = synthetic_blobs(10, 3, 0)
    path = str(tmp_path / "d.tlds")
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(ds.images, back.images)
    np.testing.assert_array_equal(ds.labels, back.labels)
    assert back.num_classes == 3


def test_dataset_bad_magic(tmp_path):
    path = str(tmp_path / "bad.tlds")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_dataset_truncated(tmp_path):
    ds = synthetic_blobs(6, 2, 1)
    path = str(tmp_path / "t.tlds")
    save_dataset(ds, path)
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:-10])
    with pytest.raises(FormatError):
        load_dataset(path)


def test_synthetic_blobs_deterministic_and_separable():
    a = synthetic_blobs(20, 4, 3)
    b = synthetic_blobs(20, 4, 3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert set(np.unique(a.labels)) == {0, 1, 2, 3}


def test_split_is_deterministic_and_disjoint():
    ds = synthetic_blobs(20, 2, 0)
    tr1, ev1 = split_train_eval(ds, seed=1)
    tr2, ev2 = split_train_eval(ds, seed=1)
    np.testing.assert_array_equal(tr1.labels, tr2.labels)
    assert tr1.count + ev1.count == ds.count
    assert ev1.count == 4


def test_train_is_deterministic():
    def run():
        model = apply_policy(build_model(small_spec(), seed=0), TrainPolicy())
        return train(model, synthetic_blobs(40, 3, 2),
                     OptimizerCfg(kind="adam", lr=1e-3, total_steps=10),
                     TrainPolicy(), seed=4, steps=10, batch_size=4)
    a, b = run(), run()
    np.testing.assert_array_equal(a.step_losses, b.step_losses)
    assert a.final_accuracy == b.final_accuracy


def test_train_loss_decreases():
    model = apply_policy(build_model(small_spec(), seed=0), TrainPolicy())
    rep = train(model, synthetic_blobs(80, 3, 5),
                OptimizerCfg(kind="adam", lr=3e-3, total_steps=60),
                TrainPolicy(), seed=0, steps=60, batch_size=8)
    first = np.mean(rep.step_losses[:10])
    last = np.mean(rep.step_losses[-10:])
    assert last < first


def test_peak_tape_bytes_match_prediction():
    model = apply_policy(build_model(small_spec(), seed=0), TrainPolicy())
    rep = train(model, synthetic_blobs(20, 3, 1),
                OptimizerCfg(kind="sgd", lr=1e-3, total_steps=3),
                TrainPolicy(), seed=0, steps=3, batch_size=4)
    assert rep.peak_tape_bytes == rep.predicted_tape_bytes


def test_evaluate_bounds():
    model = build_model(small_spec(), seed=0)
    acc = evaluate(model, synthetic_blobs(12, 3, 0))
    assert 0.0 <= acc <= 1.0


def test_empty_dataset_rejected():
    model = build_model(small_spec(), seed=0)
    empty = DatasetHandle(images=np.zeros((0, 3, 12, 12), dtype=np.float32),
                          labels=np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        train(model, empty, OptimizerCfg(kind="sgd", lr=1e-3), TrainPolicy(),
              steps=1)
