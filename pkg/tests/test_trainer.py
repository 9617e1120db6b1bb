"""Optimization loop, checkpoint container, and the end-to-end gradient check."""

import os

import numpy as np
import pytest

from genref.autodiff import GradientMap, backward
from genref.encoder import MultimodalInput
from genref.pipeline import Pipeline
from genref.trainer import (
    Adam,
    CheckpointError,
    TrainConfig,
    _random_gold,
    grad_check_pipeline,
    load_checkpoint,
    load_into,
    save_checkpoint,
    tiny_grad_config,
    train,
)


def make_dataset(cfg, n, seed=7):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append((
            MultimodalInput(
                V=rng.normal(size=(cfg.k_regions, cfg.d_dim)),
                Q=rng.normal(size=cfg.b_dim),
                C=rng.normal(size=cfg.b_dim),
            ),
            _random_gold(rng, cfg.l_a_max - 1, cfg.vocab_size),
            _random_gold(rng, cfg.l_r_max - 1, cfg.vocab_size),
        ))
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_overfit_single_sample():
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    data = make_dataset(cfg, 1)
    tc = TrainConfig(lr0=1e-2, decay=1.0, batch_size=1, epochs=200, seed=3)
    rep = train(pipe, {"train": data, "val": []}, tc)
    assert rep.epochs_run == 200
    assert rep.train_losses[-1] < 0.1 * rep.train_losses[0]
    assert all(np.isfinite(x) for x in rep.train_losses)


def test_decay_one_keeps_lr_constant():
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    tc = TrainConfig(lr0=4e-4, decay=1.0, batch_size=2, epochs=4, seed=0)
    rep = train(pipe, {"train": make_dataset(cfg, 3)}, tc)
    assert rep.lrs == [4e-4] * 4


def test_decay_schedule_multiplicative():
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    tc = TrainConfig(lr0=1e-3, decay=0.9, batch_size=2, epochs=5, seed=0)
    rep = train(pipe, {"train": make_dataset(cfg, 3)}, tc)
    for i, lr in enumerate(rep.lrs):
        assert lr == pytest.approx(1e-3 * 0.9 ** i, rel=1e-12)


def test_same_seed_bit_identical_losses():
    # dropout on, so the equality also covers the dropout stream
    cfg = tiny_grad_config(dropout_p=0.3)
    data = {"train": make_dataset(cfg, 6), "val": make_dataset(cfg, 2, seed=8)}
    tc = TrainConfig(lr0=1e-3, decay=0.9, batch_size=2, epochs=3, seed=11)
    rep1 = train(Pipeline(cfg), data, tc)
    rep2 = train(Pipeline(cfg), data, tc)
    assert rep1.train_losses == rep2.train_losses
    assert rep1.val_losses == rep2.val_losses


def test_adam_zero_gradient_is_noop():
    pipe = Pipeline(tiny_grad_config())
    before = {n: t.data.copy() for n, t in pipe.parameters()}
    opt = Adam(pipe.parameters(), TrainConfig())
    opt.step(GradientMap(), lr=1e-2)
    for name, tensor in pipe.parameters():
        assert np.array_equal(tensor.data, before[name]), name


def test_first_batch_loss_decreases_after_one_step():
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    data = make_dataset(cfg, 4)
    inputs = [s[0] for s in data]
    ga = [s[1] for s in data]
    gr = [s[2] for s in data]
    before = pipe.forward_train(inputs, ga, gr, mode="eval").total
    tc = TrainConfig(lr0=1e-3, decay=1.0, batch_size=4, epochs=1, seed=0)
    train(pipe, {"train": data}, tc)
    after = pipe.forward_train(inputs, ga, gr, mode="eval").total
    assert after < before


def test_divergence_aborts_naming_batch():
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    pipe.embedding.W_e.data[1, 0] = np.nan  # row fed to every unroll at t=0
    tc = TrainConfig(lr0=1e-3, batch_size=2, epochs=1, seed=0)
    with pytest.raises(RuntimeError, match=r"epoch 0 batch 0"):
        train(pipe, {"train": make_dataset(cfg, 2)}, tc)


def test_empty_training_set_rejected():
    pipe = Pipeline(tiny_grad_config())
    with pytest.raises(ValueError):
        train(pipe, {"train": []}, TrainConfig())


def test_callback_stops_early():
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    tc = TrainConfig(lr0=1e-3, batch_size=2, epochs=10, seed=0)
    rep = train(pipe, {"train": make_dataset(cfg, 2)}, tc,
                callback=lambda epoch, tr, va: epoch == 1)
    assert rep.epochs_run == 2
    assert len(rep.train_losses) == 2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(decay=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def trained_pipe(tmp_path, epochs=2):
    cfg = tiny_grad_config()
    pipe = Pipeline(cfg)
    tc = TrainConfig(lr0=1e-3, batch_size=2, epochs=epochs, seed=5)
    path = str(tmp_path / "model.ckpt")
    rep = train(pipe, {"train": make_dataset(cfg, 4)}, tc, checkpoint_path=path)
    return cfg, pipe, path, rep


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg, pipe, path, rep = trained_pipe(tmp_path)
    assert rep.checkpoint_path == path
    assert not os.path.exists(path + ".tmp")
    loaded = load_checkpoint(path)
    assert loaded.config == pipe.config
    for (n1, t1), (n2, t2) in zip(pipe.parameters(), loaded.parameters()):
        assert n1 == n2
        assert t1.data.dtype == t2.data.dtype == np.float64
        assert np.array_equal(t1.data, t2.data), n1

    batch = [s[0] for s in make_dataset(cfg, 2, seed=42)]
    outs_a = pipe.generate(batch)
    outs_b = loaded.generate(batch)
    for oa, ob in zip(outs_a, outs_b):
        for name in oa.block_order:
            assert oa.sequences[name] == ob.sequences[name]
            assert np.array_equal(oa.attention[name], ob.attention[name])


def test_checkpoint_truncated_rejected(tmp_path):
    _, _, path, _ = trained_pipe(tmp_path, epochs=0)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_rejected(tmp_path):
    _, _, path, _ = trained_pipe(tmp_path, epochs=0)
    blob = open(path, "rb").read()
    open(path, "wb").write(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    import struct

    _, _, path, _ = trained_pipe(tmp_path, epochs=0)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    _, _, path, _ = trained_pipe(tmp_path, epochs=0)
    with open(path, "ab") as fh:
        fh.write(b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    cfg, pipe, path, _ = trained_pipe(tmp_path, epochs=0)
    other = Pipeline(tiny_grad_config(h_dim=16))
    with pytest.raises(CheckpointError, match="config mismatch"):
        load_into(other, path)
    # same config accepts and matches bitwise
    same = Pipeline(tiny_grad_config())
    load_into(same, path)
    for (n1, t1), (n2, t2) in zip(pipe.parameters(), same.parameters()):
        assert np.array_equal(t1.data, t2.data), n1


# ---------------------------------------------------------------------------
# pipeline-wide gradient verification
# ---------------------------------------------------------------------------

def micro_config(**over):
    base = dict(h_dim=4, a_dim=2, e_dim=3, d_dim=3, b_dim=4, l_dim=3,
                k_regions=2, l_a_max=2, l_r_max=3, vocab_size=12)
    base.update(over)
    return tiny_grad_config(**base)


def test_grad_check_pipeline_micro():
    assert grad_check_pipeline(micro_config()) < 1e-4


def test_grad_check_pipeline_micro_no_refine():
    assert grad_check_pipeline(micro_config(n_refine=0)) < 1e-4


def test_grad_check_pipeline_micro_image_off():
    assert grad_check_pipeline(micro_config(input_variant="qc")) < 1e-4


def test_image_off_v_gradient_exactly_zero():
    cfg = tiny_grad_config(input_variant="qc")
    pipe = Pipeline(cfg)
    data = make_dataset(cfg, 2)
    tens = pipe.make_input_tensors([s[0] for s in data])
    lb = pipe.forward_from_tensors(tens, [s[1] for s in data], [s[2] for s in data], mode="eval")
    gm = backward(lb.tensor)
    assert np.all(gm.get(tens["V"]) == 0.0)
    assert np.any(gm.get(tens["Q"]) != 0.0)


def test_grad_check_pipeline_epsilon_validated():
    with pytest.raises(ValueError):
        grad_check_pipeline(micro_config(), epsilon=2e-3)
