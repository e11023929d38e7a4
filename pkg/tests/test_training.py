"""Adam behaviour, the training loop, and checkpoint files."""

import numpy as np
import pytest

from itmatch import tensor as tt
from itmatch.dataio import gen_synthetic
from itmatch.errors import ConfigError, ContractError, DataError
from itmatch.evaluation import evaluate, rsum
from itmatch.model import ModelConfig, init_params
from itmatch.tensor import ParamStore, backward
from itmatch.training import (
    TrainConfig,
    adam_init,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_csv,
)


def _scalar_store(value=3.0):
    store = ParamStore()
    store.add("theta", tt.parameter(np.asarray(value)))
    return store


def _tiny_model():
    return ModelConfig(
        vocab_size=64, d_raw=16, embed_dim=16, hidden_dim=8, sim_dim=8,
        n_layers=1, temperature=9.0,
    )


def _tiny_data(n_pairs=4, seed=3):
    return gen_synthetic(
        n_pairs=n_pairs, k=2, d_raw=16, caption_len=2, vocab_size=64,
        seed=seed, signal_strength=1.0,
    )


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_is_fixed_point():
    store = _scalar_store()
    state = adam_init(store)
    grads = {"theta": tt.constant(np.asarray(0.0))}
    new_store, new_state = adam_step(store, grads, state, lr=0.1)
    assert new_store["theta"].data == store["theta"].data
    assert new_state.step == 1


def test_adam_first_step_moves_by_lr():
    # m_hat = g, v_hat = g^2 on step one, so the move is lr * g / (|g| + eps)
    store = _scalar_store(3.0)
    state = adam_init(store)
    loss = tt.square(store["theta"])
    grads = backward(loss, store)
    new_store, _ = adam_step(store, grads, state, lr=0.1)
    assert abs(float(new_store["theta"].data) - (3.0 - 0.1)) < 0.1 * 1e-6


def test_adam_descends_quadratic():
    store = _scalar_store(3.0)
    state = adam_init(store)
    for _ in range(100):
        loss = tt.square(store["theta"])
        grads = backward(loss, store)
        store, state = adam_step(store, grads, state, lr=0.1)
    assert abs(float(store["theta"].data)) < 0.05


def test_adam_zero_lr_keeps_params():
    store = _scalar_store(3.0)
    state = adam_init(store)
    loss = tt.square(store["theta"])
    grads = backward(loss, store)
    new_store, new_state = adam_step(store, grads, state, lr=0.0)
    assert float(new_store["theta"].data) == 3.0
    assert new_state.step == 1


def test_adam_leaves_inputs_untouched():
    store = _scalar_store(3.0)
    state = adam_init(store)
    loss = tt.square(store["theta"])
    grads = backward(loss, store)
    adam_step(store, grads, state, lr=0.1)
    assert float(store["theta"].data) == 3.0
    assert float(state.m["theta"]) == 0.0
    assert state.step == 0


def test_adam_missing_grad_rejected():
    store = _scalar_store()
    with pytest.raises(ContractError):
        adam_step(store, {}, adam_init(store), lr=0.1)


def test_adam_grad_shape_mismatch_rejected():
    store = _scalar_store()
    grads = {"theta": tt.constant(np.zeros(3))}
    with pytest.raises(ContractError):
        adam_step(store, grads, adam_init(store), lr=0.1)


# ------------------------------------------------------------ training

@pytest.mark.parametrize(
    "kwargs",
    [
        {"epochs": 0},
        {"batch_size": 1},
        {"lr": -0.1},
        {"lr_decay_epoch": -1},
        {"lr_decay_epoch": 99},
        {"margin": -0.2},
        {"eval_every": 0},
    ],
)
def test_train_config_validation(kwargs):
    base = {"model": _tiny_model(), "epochs": 5, "lr_decay_epoch": 5}
    base.update(kwargs)
    with pytest.raises(ConfigError):
        TrainConfig(**base)


def test_train_rejects_empty_and_single_pair_data():
    cfg = TrainConfig(model=_tiny_model(), epochs=1, lr_decay_epoch=1, batch_size=2)
    with pytest.raises(ConfigError):
        train([], cfg)
    with pytest.raises(ConfigError):
        train(_tiny_data(n_pairs=1), cfg)


def test_train_is_deterministic():
    data = _tiny_data()
    tc = TrainConfig(
        model=_tiny_model(), epochs=3, lr=0.01, lr_decay_epoch=3,
        batch_size=4, seed=0, eval_every=3,
    )
    a = train(data, tc)
    b = train(data, tc)
    assert a.loss_curve == b.loss_curve
    for name in a.params.names():
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_train_loss_decreases_on_overfit_smoke():
    data = _tiny_data()
    tc = TrainConfig(
        model=_tiny_model(), epochs=60, lr=0.01, lr_decay_epoch=60,
        batch_size=4, seed=0, eval_every=60,
    )
    res = train(data, tc)
    first = res.loss_curve[0][1]
    final = res.loss_curve[-1][1]
    assert final < 0.5 * first


def test_train_zero_lr_from_start_never_moves():
    data = _tiny_data()
    tc = TrainConfig(
        model=_tiny_model(), epochs=2, lr=0.01, lr_decay_epoch=0,
        lr_decay_factor=0.0, batch_size=4, seed=7, eval_every=2,
    )
    res = train(data, tc)
    init = init_params(tc.model, seed=7)
    for name in init.names():
        assert np.array_equal(res.params[name].data, init[name].data)


def test_train_decay_at_final_epoch_never_fires():
    data = _tiny_data()
    base = dict(model=_tiny_model(), epochs=3, lr=0.01, batch_size=4, seed=0, eval_every=3)
    with_boundary = train(data, TrainConfig(lr_decay_epoch=3, lr_decay_factor=0.0, **base))
    without = train(data, TrainConfig(lr_decay_epoch=3, lr_decay_factor=1.0, **base))
    assert with_boundary.loss_curve == without.loss_curve


def test_train_skips_single_leftover_pair():
    data = _tiny_data(n_pairs=3)
    tc = TrainConfig(
        model=_tiny_model(), epochs=2, lr_decay_epoch=2, batch_size=2,
        seed=0, eval_every=2,
    )
    res = train(data, tc)
    # 3 pairs with batch 2 leave a singleton each epoch; it cannot form a
    # negative so only one step per epoch lands in the curve
    assert len(res.loss_curve) == 2
    assert [s for s, _ in res.loss_curve] == [1, 2]


def test_train_best_snapshot_matches_val_history():
    data = _tiny_data()
    tc = TrainConfig(
        model=_tiny_model(), epochs=4, lr=0.01, lr_decay_epoch=4,
        batch_size=4, seed=0, eval_every=1,
    )
    res = train(data, tc)
    assert len(res.val_history) == 4
    assert res.best_rsum == max(score for _, score in res.val_history)
    assert res.best_epoch == min(e for e, s in res.val_history if s == res.best_rsum)
    sentence, image = evaluate(res.best_params, tc.model, data)
    assert rsum([sentence, image]) == res.best_rsum


# ---------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    cfg = _tiny_model()
    params = init_params(cfg, seed=4)
    save_checkpoint(tmp_path / "ckpt", params, cfg)
    loaded, loaded_cfg = load_checkpoint(tmp_path / "ckpt")
    assert loaded_cfg == cfg
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded[name].data, params[name].data)


def test_checkpoint_roundtrip_nondefault_config(tmp_path):
    cfg = ModelConfig(
        vocab_size=30, d_raw=7, embed_dim=5, hidden_dim=6, sim_dim=4,
        n_layers=0, temperature=4.0, stream="t2i_only", hierarchical=False,
        row_softmax=True, share_sim_w=True, max_caption_len=17,
    )
    params = init_params(cfg, seed=1)
    save_checkpoint(tmp_path / "ckpt", params, cfg)
    _, loaded_cfg = load_checkpoint(tmp_path / "ckpt")
    assert loaded_cfg == cfg


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope")


def test_checkpoint_blob_corruption_detected(tmp_path):
    cfg = _tiny_model()
    save_checkpoint(tmp_path / "ckpt", init_params(cfg, seed=4), cfg)
    blob_path = tmp_path / "ckpt" / "params.bin"
    raw = bytearray(blob_path.read_bytes())
    raw[11] ^= 0xFF
    blob_path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="checksum"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_truncated_blob_detected(tmp_path):
    cfg = _tiny_model()
    save_checkpoint(tmp_path / "ckpt", init_params(cfg, seed=4), cfg)
    blob_path = tmp_path / "ckpt" / "params.bin"
    blob_path.write_bytes(blob_path.read_bytes()[:-8])
    with pytest.raises(DataError, match="bytes"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_bad_version_detected(tmp_path):
    cfg = _tiny_model()
    save_checkpoint(tmp_path / "ckpt", init_params(cfg, seed=4), cfg)
    manifest = tmp_path / "ckpt" / "manifest"
    text = manifest.read_text().replace("version: 1", "version: 999")
    manifest.write_text(text)
    with pytest.raises(DataError, match="version"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_bad_model_field_detected(tmp_path):
    cfg = _tiny_model()
    save_checkpoint(tmp_path / "ckpt", init_params(cfg, seed=4), cfg)
    manifest = tmp_path / "ckpt" / "manifest"
    text = manifest.read_text().replace("model.stream: both", "model.stream: sideways")
    manifest.write_text(text)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "ckpt")


# ------------------------------------------------------------ loss csv

def test_write_loss_csv_roundtrips_exact_floats(tmp_path):
    curve = [(1, 3.0626954469277097), (2, 0.8), (3, 1.0 / 3.0)]
    path = tmp_path / "loss.csv"
    write_loss_csv(path, curve)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss"
    for (step, loss), line in zip(curve, lines[1:]):
        s, _, v = line.partition(",")
        assert int(s) == step
        assert float(v) == loss
