import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asgl import synth
from asgl import tensor as tn
from asgl import trainer
from asgl.errors import CheckpointFileError, ConfigError, DataError, NumericError
from asgl.pose import Tracklet

TINY = dict(refine_dims=(4, 8, 16), gat_dims=(8, 8), sta_channels=(8, 16), heads=2, embed_dim=8,
            appearance_hidden=8, clip_len=4)


def _tracklet(person, i, frames=20, rng=None, app=None):
    rng = rng or np.random.default_rng(zlib.crc32(f"{person}/{i}".encode()))
    return Tracklet(tracklet_id=f"{person}_t{i}", person_id=person, clothing_id="c0", camera_id=f"cam{i}",
                    joints=rng.normal(scale=0.1, size=(frames, 14, 3)), appearance=app)


@pytest.fixture(scope="module")
def toy_train():
    return synth.normalized_splits(synth.default_spec(2, tracklets_per_identity=2, heldout_per_identity=0,
                                                      frames=16))["train"]


# ---------------------------------------------------------------- sampling

def test_all_four_tracklets_used():
    trs = [_tracklet(p, i) for p in ("a", "b") for i in range(2)]
    batch = trainer.pk_sample(trs, 2, 2, np.random.default_rng(0), clip_len=4)
    assert sorted(batch.tracklet_ids) == sorted(t.tracklet_id for t in trs)
    assert batch.clips.shape == (4, 4, 14, 3)


def test_single_tracklet_resampled_with_distinct_starts():
    trs = [_tracklet("a", 0, frames=30), _tracklet("b", 0, frames=30)]
    batch = trainer.pk_sample(trs, 2, 4, np.random.default_rng(3), clip_len=4, stride=2)
    for person in ("a", "b"):
        starts = [s for s, tid in zip(batch.starts, batch.tracklet_ids) if tid.startswith(person)]
        assert len(starts) == 4 and len(set(starts)) == 4


def test_short_tracklet_reuses_starts_when_exhausted():
    trs = [_tracklet("a", 0, frames=9), _tracklet("b", 0, frames=9)]
    batch = trainer.pk_sample(trs, 2, 4, np.random.default_rng(0), clip_len=4, stride=2)
    assert len(batch.labels) == 8


def test_fixed_seed_same_batch():
    trs = [_tracklet(p, i) for p in "abcdef" for i in range(3)]
    a = trainer.pk_sample(trs, 3, 2, np.random.default_rng(11), clip_len=4)
    b = trainer.pk_sample(trs, 3, 2, np.random.default_rng(11), clip_len=4)
    assert a.tracklet_ids == b.tracklet_ids and a.starts == b.starts
    assert a.clips.tobytes() == b.clips.tobytes()


def test_too_few_identities():
    with pytest.raises(DataError):
        trainer.pk_sample([_tracklet("a", 0)], 2, 2, np.random.default_rng(0))


@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_batch_has_p_identities_k_clips(P, K, seed):
    rng = np.random.default_rng(seed)
    trs = [_tracklet(f"p{j}", i, rng=rng) for j in range(6) for i in range(int(rng.integers(1, 4)))]
    batch = trainer.pk_sample(trs, P, K, rng, clip_len=3)
    _, counts = np.unique(batch.labels, return_counts=True)
    assert len(counts) == P and (counts == K).all()


# ---------------------------------------------------------------- adam

def _param(v):
    return {"w": tn.Tensor(np.array(v, dtype=np.float64), requires_grad=True)}


def test_zero_gradient_keeps_params_and_decays_moments():
    p = _param([1.0, -2.0])
    state = trainer.init_adam_state(p)
    state["m"]["w"][...] = 1.0
    state["v"]["w"][...] = 1.0
    trainer.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state["m"]["w"], 0.9)
    np.testing.assert_allclose(state["v"]["w"], 0.999)
    p2 = _param([1.0, -2.0])
    s2 = trainer.init_adam_state(p2)
    trainer.adam_step(p2, {"w": np.zeros(2)}, s2, lr=0.1)
    assert p2["w"].data.tolist() == [1.0, -2.0]


def test_constant_gradient_step_tends_to_lr():
    p = _param([0.0])
    state = trainer.init_adam_state(p)
    prev = 0.0
    for _ in range(500):
        trainer.adam_step(p, {"w": np.array([0.37])}, state, lr=0.01)
        step = prev - p["w"].data[0]
        prev = p["w"].data[0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_single_step_closed_form():
    g, lr, b1, b2, eps, x = 0.8, 0.05, 0.9, 0.999, 1e-8, 2.0
    p = _param([x])
    trainer.adam_step(p, {"w": np.array([g])}, trainer.init_adam_state(p), lr, (b1, b2), eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert p["w"].data[0] == pytest.approx(x - lr * m_hat / (np.sqrt(v_hat) + eps), abs=1e-15)


def test_non_finite_gradient_names_parameter():
    p = _param([1.0])
    with pytest.raises(NumericError, match="w"):
        trainer.adam_step(p, {"w": np.array([np.nan])}, trainer.init_adam_state(p), 0.1)


def test_gradient_shape_mismatch():
    p = _param([1.0, 2.0])
    with pytest.raises(ConfigError):
        trainer.adam_step(p, {"w": np.zeros(3)}, trainer.init_adam_state(p), 0.1)


# ---------------------------------------------------------------- schedule

@pytest.mark.parametrize("epoch,lr", [(0, 5e-3), (39, 5e-3), (40, 5e-4), (80, 5e-5), (119, 5e-5)])
def test_lr_schedule(epoch, lr):
    assert trainer.lr_schedule(epoch) == lr


def test_lr_schedule_negative_epoch():
    with pytest.raises(ValueError):
        trainer.lr_schedule(-1)


def test_config_defaults_and_validation():
    c = trainer.TrainConfig()
    assert (c.P, c.K, c.batch_size, c.epochs, c.lr, c.decay_every, c.clip_len, c.stride) == \
        (8, 4, 32, 120, 5e-3, 40, 8, 2)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(P=0)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(mode="f16")


# ---------------------------------------------------------------- checkpoints

def _ckpt(rng):
    return trainer.Checkpoint(
        params={"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4).astype(np.float32)},
        adam={"t": 3, "m": {"a": rng.normal(size=(2, 3))}, "v": {"a": rng.random(size=(2, 3))}},
        epoch=2, rng_state={"state": 5}, meta={"k": [1, 2]}, buffers={"x": np.arange(3.0)},
    )


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    c = _ckpt(rng)
    trainer.save_checkpoint(tmp_path / "a.bin", c)
    back = trainer.load_checkpoint(tmp_path / "a.bin")
    for k in c.params:
        assert back.params[k].dtype == c.params[k].dtype
        assert back.params[k].tobytes() == c.params[k].tobytes()
    assert back.adam["t"] == 3 and back.epoch == 2 and back.meta == {"k": [1, 2]}
    trainer.save_checkpoint(tmp_path / "b.bin", back)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage")
    with pytest.raises(CheckpointFileError):
        trainer.load_checkpoint(tmp_path / "x.bin")
    with pytest.raises(CheckpointFileError):
        trainer.load_checkpoint(tmp_path / "missing.bin")


# ---------------------------------------------------------------- training loop

def test_one_epoch_on_two_identities(toy_train, tmp_path):
    cfg = trainer.TrainConfig(P=2, K=2, epochs=1, **TINY)
    res = trainer.train(cfg, toy_train, out_dir=tmp_path)
    assert len(res.epoch_losses) == 1 and np.isfinite(res.epoch_losses[0])
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "loss.log").read_text().startswith("epoch=0 loss=")


def test_same_seed_same_trace(toy_train, tmp_path):
    cfg = trainer.TrainConfig(P=2, K=2, epochs=3, seed=5, **TINY)
    a = trainer.train(cfg, toy_train, out_dir=tmp_path / "a")
    b = trainer.train(cfg, toy_train, out_dir=tmp_path / "b")
    assert a.step_losses == b.step_losses
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    c = trainer.train(trainer.TrainConfig(P=2, K=2, epochs=3, seed=6, **TINY), toy_train)
    assert c.step_losses != a.step_losses


def test_checkpoint_restores_model(toy_train, tmp_path):
    res = trainer.train(trainer.TrainConfig(P=2, K=2, epochs=2, **TINY), toy_train, out_dir=tmp_path)
    model = trainer.model_from_checkpoint(trainer.load_checkpoint(tmp_path / "checkpoint.bin"))
    clips = np.stack([tr.clip(4, 2, center=True) for tr in toy_train])
    app = np.stack([tr.appearance for tr in toy_train])
    np.testing.assert_array_equal(model.embed(clips, app), res.model.embed(clips, app))


def test_max_steps_caps_training(toy_train):
    res = trainer.train(trainer.TrainConfig(P=2, K=2, epochs=10, max_steps=3, **TINY), toy_train)
    assert len(res.step_losses) == 3


def test_empty_training_set():
    with pytest.raises(DataError):
        trainer.train(trainer.TrainConfig(**TINY), [])


def test_appearance_augmentation(rng):
    app = np.ones((6, 3))
    out = trainer.augment_appearance(app, rng, jitter=0.0, dropout=1.0)
    assert (out == 0).all() and (app == 1).all()
    assert not np.array_equal(trainer.augment_appearance(app, rng, jitter=0.5), app)
