import json

import numpy as np
import pytest

from tsrelab.datagen import DataConfig, build_corpus
from tsrelab.encoder import EncoderConfig, RetrievalModel
from tsrelab.numcore import ConfigurationError
from tsrelab.objective import LossConfig
from tsrelab.trainer import (
    AdamState,
    Checkpoint,
    TrainConfig,
    TrainingError,
    adam_step,
    batch_indices,
    model_from_checkpoint,
    train,
    trainable_params,
    write_log,
)
from tsrelab.tsre import TSREConfig

ENC = EncoderConfig(num_layers=1, hidden_dim=8, num_heads=2, ff_dim=16, embed_dim=6)


@pytest.fixture(scope="module")
def corpora():
    base = DataConfig(num_images=24, num_speakers=8)
    return {k: build_corpus(DataConfig(**{**base.to_dict(), "k": k}), seed=1) for k in (1, 2)}


def test_adam_two_step_trace_by_hand():
    # theta=1, g1=0.5, g2=-1, lr=0.1, default betas, no decay
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p, s = {"w": np.array([1.0])}, AdamState()
    p, s = adam_step(p, {"w": np.array([0.5])}, s, lr)
    m1, v1 = 0.05, 0.00025
    assert s.m["w"][0] == pytest.approx(m1) and s.v["w"][0] == pytest.approx(v1)
    theta1 = 1.0 - lr * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + eps)
    assert p["w"][0] == pytest.approx(theta1, abs=1e-15)     # 0.9 up to eps
    p, s = adam_step(p, {"w": np.array([-1.0])}, s, lr)
    m2, v2 = 0.9 * m1 - 0.1, 0.999 * v1 + 0.001
    theta2 = theta1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert p["w"][0] == pytest.approx(theta2, abs=1e-15)
    assert s.step == 2


def test_adam_decoupled_weight_decay_with_zero_grad():
    p, _ = adam_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, AdamState(), lr=0.1,
                     weight_decay=0.5)
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_does_not_mutate_inputs():
    theta = np.array([1.0, 2.0])
    state = AdamState()
    adam_step({"w": theta}, {"w": np.ones(2)}, state, 0.1)
    assert theta.tolist() == [1.0, 2.0] and state.step == 0 and not state.m


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(10, 3, seed=4, step=s) for s in range(3)])
    assert len(set(seen.tolist())) == 9
    np.testing.assert_array_equal(batch_indices(10, 3, 4, 1), batch_indices(10, 3, 4, 1))
    with pytest.raises(ConfigurationError):
        batch_indices(2, 3, 0, 0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(stage="pretrain")
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)
    assert TrainConfig(stage="tsre-finetune").frozen_prefixes()
    assert TrainConfig().frozen_prefixes() == ()


def test_image_tower_and_backbone_frozen_in_finetune(corpora):
    model = RetrievalModel(ENC, seed=0, tsre=TSREConfig("scc-b3"))
    names = trainable_params(model, TrainConfig(stage="tsre-finetune"))
    assert "image/proj" not in names
    assert all(n.startswith(("tsre/", "encoder/head/")) for n in names)


def test_base_training_moves_speech_not_image(corpora):
    model = RetrievalModel(ENC, seed=0)
    img = model.image.params["image/proj"].data.copy()
    before = model.speech.params["encoder/input/w"].data.copy()
    res = train(model, corpora[1], TrainConfig(max_steps=3, batch_size=4, eval_every=2))
    np.testing.assert_array_equal(model.image.params["image/proj"].data, img)
    assert not np.array_equal(model.speech.params["encoder/input/w"].data, before)
    assert [r["step"] for r in res.history if "val_s2i" in r] == [0, 2, 3]


def test_finetune_only_touches_unfrozen(corpora):
    base = train(RetrievalModel(ENC, seed=0), corpora[1], TrainConfig(max_steps=2, batch_size=4)).final
    model = RetrievalModel(ENC, seed=0, tsre=TSREConfig("scl"))
    train(model, corpora[2], TrainConfig(max_steps=2, batch_size=4, stage="tsre-finetune"), init=base)
    for k, v in base.params.items():
        if k.startswith(("encoder/block", "encoder/input", "image/")):
            np.testing.assert_array_equal(model.parameters()[k].data, v)


def test_stage_guards(corpora):
    with pytest.raises(TrainingError):
        train(RetrievalModel(ENC, 0, tsre=TSREConfig("scl")), corpora[2],
              TrainConfig(max_steps=1, batch_size=4, stage="tsre-finetune"))
    with pytest.raises(ConfigurationError):
        train(RetrievalModel(ENC, 0, tsre=TSREConfig("scl")), corpora[2],
              TrainConfig(max_steps=1, batch_size=4))


def test_resume_is_bitwise_identical(corpora, tmp_path):
    cfg = TrainConfig(max_steps=6, batch_size=4, eval_every=3, weight_decay=1e-3)
    straight = train(RetrievalModel(ENC, seed=2), corpora[1], cfg).final

    half = train(RetrievalModel(ENC, seed=2), corpora[1],
                 TrainConfig(**{**cfg.to_dict(), "max_steps": 3})).final
    half.save(tmp_path / "half.ckpt")
    resumed = train(RetrievalModel(ENC, seed=2), corpora[1], cfg,
                    resume=Checkpoint.load(tmp_path / "half.ckpt")).final
    for k in straight.params:
        np.testing.assert_array_equal(straight.params[k], resumed.params[k])
    assert straight.best_step == resumed.best_step


def test_checkpoint_roundtrip_and_bytes(corpora, tmp_path):
    cfg = TrainConfig(max_steps=2, batch_size=4)
    a = train(RetrievalModel(ENC, seed=0), corpora[1], cfg, loss_cfg=LossConfig(0.1)).final
    b = train(RetrievalModel(ENC, seed=0), corpora[1], cfg, loss_cfg=LossConfig(0.1)).final
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = Checkpoint.load(tmp_path / "a.ckpt")
    model = model_from_checkpoint(back)
    assert model.log_temperature.item() == pytest.approx(np.log(0.1))
    for k, v in a.params.items():
        np.testing.assert_array_equal(model.parameters()[k].data, v)


def test_write_log(tmp_path):
    write_log([{"step": 1, "loss": 0.5}], tmp_path / "log" / "train.jsonl")
    assert json.loads((tmp_path / "log" / "train.jsonl").read_text()) == {"loss": 0.5, "step": 1}


def test_zero_grad_zero_decay_is_noop():
    p, _ = adam_step({"w": np.array([1.5, -2.0])}, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])


def test_lr_zero_leaves_parameters(corpora):
    model = RetrievalModel(ENC, seed=0)
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    train(model, corpora[1], TrainConfig(lr=0.0, max_steps=1, batch_size=4, weight_decay=0.0))
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_fixed_batch_loss_decreases(corpora):
    from tsrelab.trainer import batch_loss
    model = RetrievalModel(EncoderConfig(), seed=0)
    samples = corpora[1].split("train")[:32]
    params = model.trainable()
    state, losses = AdamState(), []
    for _ in range(10):
        loss = batch_loss(model, corpora[1], samples, LossConfig())
        loss.backward()
        losses.append(loss.item())
        new, state = adam_step({k: p.data for k, p in params.items()},
                               {k: p.grad for k, p in params.items()}, state, lr=1e-3)
        for k, p in params.items():
            p.data, p.grad = new[k], None
    assert all(b < a for a, b in zip(losses, losses[1:]))
