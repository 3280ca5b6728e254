import math

import numpy as np
import pytest
import torch

from conftest import freeze
from dfacon.data import group_by_anchor, load_manifest, split_groups
from dfacon.embedder import ProbePoint, make_encoder
from dfacon.errors import CheckpointIntegrityError, ConfigurationError, IncompatibleCheckpointError
from dfacon.trainer import (
    CHECKPOINT_MAGIC,
    TrainConfig,
    lr_schedule,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
    train,
    validation_loss,
)


@pytest.fixture(scope="module")
def split(synth_dir):
    return split_groups(group_by_anchor(load_manifest(synth_dir)), 0.8, seed=0)


def small_config(**kw):
    base = dict(epochs=5, warmup_epochs=1, base_lr=0.05, batch_size=32, patience=10, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule_paper_defaults():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.0
    assert abs(lr_schedule(10, cfg) - 0.01) <= 1e-12
    assert abs(lr_schedule(30, cfg) - 0.005) <= 1e-12
    assert lr_schedule(50, cfg) == pytest.approx(0.0, abs=1e-18)


def test_schedule_continuous_at_warmup_junction():
    cfg = TrainConfig()
    assert abs(lr_schedule(10 - 1e-6, cfg) - lr_schedule(10, cfg)) < 1e-8


def test_schedule_shape():
    cfg = TrainConfig()
    ramp = [lr_schedule(t, cfg) for t in np.linspace(0, 10, 21)]
    decay = [lr_schedule(t, cfg) for t in np.linspace(10, 50, 41)]
    assert np.all(np.diff(ramp) > 0) and np.all(np.diff(decay) < 0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(base_lr=0.0)


def test_smoke_training_reduces_loss(split):
    handle = make_encoder("toy_cnn", seed=0)
    result = train(split, handle, small_config())
    log = result.log
    assert len(log) == 5
    assert log[-1]["train_loss"] < log[0]["train_loss"]
    for rec in log:
        assert rec["lr"] == lr_schedule(rec["epoch"], small_config())
    assert result.state.best_epoch == int(np.argmin([r["val_loss"] for r in log]))


def test_first_epoch_loss_is_reproducible(split):
    cfg = small_config(epochs=2)
    a = train(split, make_encoder("toy_cnn", seed=0), cfg).log[0]["train_loss"]
    b = train(split, make_encoder("toy_cnn", seed=0), cfg).log[0]["train_loss"]
    assert a == b


def test_forced_stall_stops_after_two_more_evaluations(split, monkeypatch):
    handle = freeze(make_encoder("toy_cnn", seed=0))
    calls = []
    import dfacon.trainer as T

    real = T.validation_loss
    monkeypatch.setattr(T, "validation_loss", lambda *a: calls.append(1) or real(*a))
    result = train(split, handle, small_config(epochs=10, patience=1))
    assert result.stopped_early
    assert result.state.best_epoch == 0
    assert len(calls) == 3 and len(result.log) == 3


def test_early_stop_bound(split):
    cfg = small_config(epochs=8, patience=1)
    result = train(split, make_encoder("toy_cnn", seed=1), cfg)
    assert len(result.log) <= result.state.best_epoch + cfg.patience + 2


def test_validation_does_not_touch_parameters(split):
    handle = make_encoder("toy_cnn", seed=0)
    handle.model.train()
    before = parameter_digest(handle.model)
    validation_loss(handle, split.val_groups, small_config())
    assert parameter_digest(handle.model) == before
    assert handle.model.training


def test_empty_validation_is_configuration_error(split):
    from dfacon.data import DatasetSplit

    empty = DatasetSplit(split.train_groups, (), 0, 0.8)
    with pytest.raises(ConfigurationError):
        train(empty, make_encoder("toy_cnn"), small_config())


def test_nonfinite_loss_aborts_with_diagnostic(split):
    from dfacon.errors import NumericError

    handle = make_encoder("toy_cnn", seed=0)
    with torch.no_grad():
        handle.model.head.net[0].weight.fill_(float("nan"))
    with pytest.raises(NumericError, match=r"epoch 0, step 0, lr .*batch N="):
        train(split, handle, small_config())


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, synth_dir):
    handle = make_encoder("toy_cnn", seed=11)
    paths = sorted(str(p) for p in (synth_dir / "originals").iterdir())[:3]
    before = handle.embed_paths(paths)
    path = save_checkpoint(handle, tmp_path / "m.ckpt", small_config())
    loaded = load_checkpoint(path)
    after = loaded.embed_paths(paths)
    assert np.allclose(np.sum(before * after, axis=1), 1.0, atol=1e-6)
    assert loaded.fingerprint() == handle.fingerprint()
    assert loaded.head_config.variant == "mlp"
    assert loaded.embed_paths(paths[:1], ProbePoint.PROJECTION_OUTPUT).shape == (1, 128)


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(make_encoder("toy_cnn"), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for cut in (5, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_corrupted_and_incompatible_checkpoint(tmp_path):
    path = save_checkpoint(make_encoder("toy_cnn"), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path / "c.ckpt")
    raw = bytearray(path.read_bytes())
    raw[len(CHECKPOINT_MAGIC)] = 99
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "v.ckpt")


def test_linear_head_survives_round_trip(tmp_path):
    handle = make_encoder("toy_cnn", head_variant="linear", projection_dim=32)
    loaded = load_checkpoint(save_checkpoint(handle, tmp_path / "l.ckpt"))
    assert loaded.head_config.variant == "linear"
    assert loaded.dim(ProbePoint.PROJECTION_OUTPUT) == 32
    assert math.isclose(loaded.dim(ProbePoint.ENCODER_OUTPUT), 64)
