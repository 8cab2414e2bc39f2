import math

import numpy as np
import pytest

from dentseg.data import PreprocessedSample, SplitAssignment
from dentseg.errors import ConfigMismatch, CorruptArchive, NonFiniteLoss, SchemaError, ShapeMismatch
from dentseg.models import ModelConfig, build_baseline, build_vgg19
from dentseg.nn import Sigmoid
from dentseg.train import (
    AdamState, TrainConfig, TrainingLog, adam_step, batches, bce_loss, load_checkpoint, save_checkpoint, train,
)
from helpers import blob_pair, numeric_grad, rel_error


class ReferenceAdam:
    """Textbook Adam, one scalar at a time, in plain Python floats."""

    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, p, g):
        if self.m is None:
            self.m, self.v = [0.0] * len(p), [0.0] * len(p)
        self.t += 1
        out = []
        for i, (pi, gi) in enumerate(zip(p, g)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * gi
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * gi * gi
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(pi - self.lr * mh / (math.sqrt(vh) + self.eps))
        return out


def tiny_data(n, size=8, seed=0):
    rng = np.random.default_rng(seed)
    data = {}
    for i in range(n):
        img, mask = blob_pair(rng, size)
        data[f"s{i:02d}"] = PreprocessedSample(
            np.repeat(img[None] / 255.0, 3, axis=0).astype(np.float32), (mask[None] > 127).astype(np.float32), f"s{i:02d}"
        )
    return data


# --------------------------------------------------------------------- bce

def test_bce_perfect():
    y = (np.random.default_rng(0).random((2, 1, 4, 4)) > 0.5).astype(np.float32)
    loss, _ = bce_loss(y, y)
    assert loss <= 1e-6


def test_bce_half_is_ln2(rng):
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float32)
    loss, _ = bce_loss(np.full_like(y, 0.5), y)
    assert abs(loss - math.log(2)) < 1e-12
    assert abs(loss - 0.693147) < 1e-6


def test_bce_gradient_fd_single_precision(rng):
    p = rng.uniform(0.05, 0.95, (2, 1, 4, 4)).astype(np.float32)
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float32)
    _, g = bce_loss(p, y)
    assert g.dtype == np.float32
    assert rel_error(g, numeric_grad(lambda: bce_loss(p, y)[0], p, 1e-3)) < 1e-3


@pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-3, 1e-3), (np.float64, 1e-6, 1e-6)])
def test_sigmoid_bce_composite_gradient(rng, dtype, h, tol):
    z = rng.standard_normal((2, 1, 4, 4)).astype(dtype)
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(dtype)
    sig = Sigmoid("s")
    _, g = bce_loss(sig.forward(z, train=True), y)
    dz = sig.backward(g)
    num = numeric_grad(lambda: bce_loss(Sigmoid("s").forward(z), y)[0], z, h)
    assert rel_error(dz, num) < tol
    np.testing.assert_allclose(dz, (Sigmoid("s").forward(z) - y) / z.size, rtol=1e-4)


def test_bce_clamped_region_has_zero_gradient():
    p = np.array([[[[0.0, 1.0, 1e-9, 0.5]]]])
    y = np.array([[[[1.0, 0.0, 1.0, 1.0]]]])
    loss, g = bce_loss(p, y)
    assert math.isfinite(loss)
    assert g[0, 0, 0, 0] == 0 and g[0, 0, 0, 1] == 0 and g[0, 0, 0, 2] == 0 and g[0, 0, 0, 3] != 0
    assert abs(loss - (2 * -math.log(1e-7) - math.log(1e-7) + math.log(2)) / 4) < 1e-9


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# -------------------------------------------------------------------- adam

def test_adam_zero_grad_is_noop():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(3)}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(params["w"], before)


def test_adam_first_step_scalar():
    params = {"w": np.array([0.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([1.0])}, state, TrainConfig(learning_rate=1e-4, adam_eps=1e-8))
    assert state.t == 1
    assert abs(params["w"][0] - (-1e-4 / (1 + 1e-8))) < 1e-18


def test_adam_matches_reference_two_steps(rng):
    p0 = rng.standard_normal(6)
    g = rng.standard_normal(6)
    params, state, cfg = {"w": p0.copy()}, AdamState(), TrainConfig(learning_rate=3e-3)
    ref = ReferenceAdam(3e-3)
    expected = p0.tolist()
    for _ in range(2):
        adam_step(params, {"w": g}, state, cfg)
        expected = ref.step(expected, g.tolist())
    np.testing.assert_allclose(params["w"], expected, rtol=0, atol=1e-12)
    assert state.t == 2
    assert np.all(state.v["w"] >= 0) and state.m["w"].shape == p0.shape


def test_adam_decreases_quadratic(rng):
    target = rng.standard_normal(5)
    w = {"w": rng.standard_normal(5)}
    loss = lambda: float(np.sum((w["w"] - target) ** 2))
    state = AdamState()
    for _ in range(20):
        before = loss()
        adam_step(w, {"w": 2 * (w["w"] - target)}, state, TrainConfig(learning_rate=1e-3))
        assert loss() < before


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), TrainConfig())


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0}, {"adam_beta1": 1.0},
                                {"adam_beta2": -0.1}, {"loss": "dice"}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.learning_rate) == (200, 4, 1e-4)
    assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-8)


# --------------------------------------------------------------------- loop

def test_batches_keep_partial():
    assert [len(b) for b in batches(list("abcdefghij"), 4)] == [4, 4, 2]
    assert [len(b) for b in batches(list("abcdefghij"), 4, keep_partial=False)] == [4, 4]


def _split(data, val=()):
    ids = [i for i in data if i not in val]
    return SplitAssignment(ids, list(val), [], 0)


def test_one_epoch_four_samples_one_step():
    data = tiny_data(4)
    log, best = train(build_baseline(ModelConfig(seed=0)), _split(data), data, TrainConfig(epochs=1))
    assert len(log) == 1 and best.meta["steps"] == 1 and best.adam.t == 1


def test_ten_samples_three_steps_per_epoch():
    data = tiny_data(10)
    log, best = train(build_baseline(ModelConfig(seed=0)), _split(data), data, TrainConfig(epochs=2))
    assert len(log) == 2
    assert best.meta["steps"] == 3 * best.epoch


def test_log_and_checkpoint_policy(tmp_path):
    data = tiny_data(6)
    split = _split(data, val=("s04", "s05"))
    ckpt = tmp_path / "best.dsw"
    log, best = train(build_baseline(ModelConfig(seed=1)), split, data, TrainConfig(epochs=4, learning_rate=1e-3),
                      checkpoint_path=ckpt, log_path=tmp_path / "log.csv")
    assert len(log) == 4
    dices = [r.val_dice for r in log.records]
    assert best.val_dice == max(dices) and best.epoch == dices.index(max(dices)) + 1
    for r in log.records:
        assert all(math.isfinite(v) for v in (r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.val_dice))
    _, _, meta = load_checkpoint(ckpt)
    assert meta["val_dice"] == max(dices) and meta["epoch"] == best.epoch
    text = (tmp_path / "log.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc,val_dice"
    assert len(lines) == 5
    assert all(len(f.split(".")[1]) == 6 for f in lines[1].split(",")[1:])
    assert TrainingLog.read_csv(tmp_path / "log.csv").to_csv() == text


def test_training_is_deterministic():
    data = tiny_data(6, 16)
    runs = []
    for _ in range(2):
        log, _ = train(build_vgg19(ModelConfig(seed=2, dropout_rate=0.3)), _split(data, ("s05",)), data,
                       TrainConfig(epochs=2, batch_size=2, seed=5))
        runs.append(log.to_csv())
    assert runs[0] == runs[1]


def test_non_finite_loss_reports_location():
    data = tiny_data(8)
    data["s05"].image[...] = np.nan
    with pytest.raises(NonFiniteLoss) as err:
        train(build_baseline(ModelConfig(seed=0)), _split(data), data, TrainConfig(epochs=1, batch_size=4, seed=0))
    assert err.value.epoch == 1 and err.value.batch in (1, 2)


def test_read_csv_schema_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,loss\n1,0.5\n")
    with pytest.raises(SchemaError):
        TrainingLog.read_csv(bad)
    bad.write_text("epoch,train_loss,train_acc,val_loss,val_acc,val_dice\n1,0.5,x,0,0,0\n")
    with pytest.raises(SchemaError):
        TrainingLog.read_csv(bad)
    bad.write_text("epoch,train_loss,train_acc,val_loss,val_acc,val_dice\n")
    with pytest.raises(SchemaError):
        TrainingLog.read_csv(bad)


# -------------------------------------------------------------- checkpoints

def _trained(arch="baseline"):
    data = tiny_data(4, 16)
    model = (build_baseline if arch == "baseline" else build_vgg19)(ModelConfig(seed=3))
    train(model, _split(data), data, TrainConfig(epochs=2, batch_size=2))
    return model


@pytest.mark.parametrize("arch", ["baseline", "vgg19_backbone"])
def test_checkpoint_roundtrip_bit_identical(tmp_path, arch):
    model = _trained(arch)
    model.train()
    model.forward(np.random.default_rng(0).random((2, 3, 16, 16), dtype=np.float32))  # moves BN stats
    state = AdamState(t=7)
    x = np.random.default_rng(1).random((2, 3, 16, 16), dtype=np.float32)
    before = model.predict(x)
    save_checkpoint(model, state, tmp_path / "c.dsw", {"note": "x"})
    loaded, lstate, meta = load_checkpoint(tmp_path / "c.dsw")
    assert loaded.architecture == arch and lstate.t == 7 and meta["note"] == "x"
    assert loaded.predict(x).tobytes() == before.tobytes()


def test_checkpoint_wrong_architecture(tmp_path):
    save_checkpoint(build_baseline(), AdamState(), tmp_path / "c.dsw")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "c.dsw", architecture="vgg19_backbone")


def test_checkpoint_tensor_mismatch(tmp_path):
    from dentseg.archive import load_weight_archive, write_weight_archive

    save_checkpoint(build_baseline(), AdamState(), tmp_path / "c.dsw")
    arc = load_weight_archive(tmp_path / "c.dsw")
    arc.meta["architecture"] = "vgg19_backbone"
    write_weight_archive(arc, tmp_path / "c.dsw")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "c.dsw")


def test_plain_archive_is_not_a_checkpoint(tmp_path):
    from dentseg.archive import WeightArchive, write_weight_archive

    write_weight_archive(WeightArchive({"t": np.ones(2, np.float32)}), tmp_path / "w.dsw")
    with pytest.raises(CorruptArchive):
        load_checkpoint(tmp_path / "w.dsw")


def test_resume_equivalence(tmp_path):
    data = tiny_data(4, 8)
    model = build_baseline(ModelConfig(seed=4))
    cfg = TrainConfig(epochs=1, learning_rate=1e-3)
    _, best = train(model, _split(data), data, cfg)
    state = best.adam
    model.load_state_dict(best.state)
    save_checkpoint(model, state, tmp_path / "c.dsw")

    rng = np.random.default_rng(8)
    grads = {k: rng.standard_normal(v.shape).astype(v.dtype) for k, v in model.parameters().items()}
    uninterrupted = model.parameters()
    adam_step(uninterrupted, grads, state, cfg)

    resumed, rstate, _ = load_checkpoint(tmp_path / "c.dsw")
    rparams = resumed.parameters()
    adam_step(rparams, grads, rstate, cfg)
    assert rstate.t == state.t
    for k in uninterrupted:
        np.testing.assert_allclose(rparams[k], uninterrupted[k], rtol=0, atol=1e-12)
