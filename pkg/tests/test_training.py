"""Teacher-forced loss, the optimizer step, and the training loop."""

import copy
import math

import numpy as np
import pytest

from streamst import autodiff as ad
from streamst.errors import ConfigError, TrainingDivergedError
from streamst.model import ModelConfig, create_parameters
from streamst.synthetic import SyntheticSpec, generate_corpus
from streamst.training import (EpochReport, TrainConfig, _apply_update,
                               _global_norm, train, utterance_loss)

SPEC = SyntheticSpec(frames_per_symbol=4, feat_dim=6, seed=21)


@pytest.fixture()
def cfg():
    return ModelConfig(feat_dim=6, vgg_channels=(2, 3), enc_layers=1,
                       hidden=8, attn_dim=8, embed_dim=6,
                       vocab=SPEC.target_vocab)


@pytest.fixture()
def params(cfg):
    return create_parameters(cfg, seed=1)


@pytest.fixture()
def corpus():
    return generate_corpus(SPEC, 12, 4, 8, seed=2)


def snapshot(params):
    return {name: t.data.copy() for name, t in params}


# ---------------------------------------------------------------------------
# loss


def test_loss_counts_tokens_including_the_end_marker(cfg, params, corpus):
    utt = corpus[0]
    loss, n_tok = utterance_loss(utt.frames, utt.target, params, cfg)
    assert n_tok == len(utt.target) + 1
    assert loss.data.shape == ()
    assert math.isfinite(float(loss.data)) and float(loss.data) > 0.0


def test_fresh_model_loss_is_near_uniform_chance(cfg, params, corpus):
    utt = corpus[0]
    loss, n_tok = utterance_loss(utt.frames, utt.target, params, cfg)
    per_token = float(loss.data) / n_tok
    chance = math.log(len(cfg.vocab) + 3)
    assert abs(per_token - chance) < 0.5


def test_loss_backward_reaches_all_parameters(cfg, params, corpus):
    utt = corpus[0]
    with ad.Tape() as tape:
        loss, _ = utterance_loss(utt.frames, utt.target, params, cfg)
    ad.backward(tape, loss)
    for name, t in params:
        assert t.grad is not None, name
        assert np.isfinite(t.grad).all(), name


# ---------------------------------------------------------------------------
# optimizer step


def test_global_norm_sums_over_all_gradients(cfg, params):
    params.zero_grads()
    for _, t in params:
        t.grad = np.zeros_like(t.data)
    params["out_b"].grad[:] = 3.0
    n = params["out_b"].data.size
    assert _global_norm(params) == pytest.approx(3.0 * math.sqrt(n))


def test_update_scales_and_steps_against_the_gradient(cfg, params):
    tcfg = TrainConfig(lr=0.1, momentum=0.0, grad_clip=1e9)
    before = snapshot(params)
    for _, t in params:
        t.grad = np.full_like(t.data, 0.004)
    _apply_update(params, {}, 0.5, tcfg)
    for name, t in params:
        step = before[name] - t.data
        # single precision: weights near 1.0 quantize the tiny step
        assert np.allclose(step, 0.1 * 0.002, atol=5e-7), name


def test_update_clips_by_global_norm(cfg, params):
    tcfg = TrainConfig(lr=1.0, momentum=0.0, grad_clip=1.0)
    before = snapshot(params)
    for _, t in params:
        t.grad = np.full_like(t.data, 100.0)
    _apply_update(params, {}, 1.0, tcfg)
    moved = 0.0
    for name, t in params:
        moved += float(np.sum(np.square(before[name] - t.data, dtype=np.float64)))
    assert math.sqrt(moved) == pytest.approx(1.0, rel=1e-4)


def test_momentum_carries_velocity_between_steps(cfg, params):
    tcfg = TrainConfig(lr=1.0, momentum=0.5, grad_clip=1e9)
    velocity = {}
    before = snapshot(params)
    for _, t in params:
        t.grad = np.full_like(t.data, 0.01)
    _apply_update(params, velocity, 1.0, tcfg)
    for _, t in params:
        t.grad = np.full_like(t.data, 0.01)
    _apply_update(params, velocity, 1.0, tcfg)
    # steps: 0.01 then 0.5*0.01 + 0.01 = 0.015, total 0.025
    for name, t in params:
        assert np.allclose(before[name] - t.data, 0.025, atol=1e-7), name


# ---------------------------------------------------------------------------
# the loop


def test_zero_epochs_leaves_parameters_untouched(cfg, params, corpus):
    before = snapshot(params)
    reports = train(params, cfg, corpus, TrainConfig(epochs=0))
    assert reports == []
    for name, t in params:
        assert np.array_equal(before[name], t.data), name


def test_loss_strictly_decreases_over_first_epochs(cfg, params, corpus):
    tcfg = TrainConfig(epochs=3, lr=0.05, batch_size=4, seed=3,
                       holdout_fraction=0.0)
    reports = train(params, cfg, corpus, tcfg)
    assert [r.epoch for r in reports] == [1, 2, 3]
    losses = [r.mean_loss for r in reports]
    assert all(a > b for a, b in zip(losses, losses[1:])), losses
    assert all(math.isnan(r.holdout_bleu) for r in reports)


def test_holdout_fraction_reports_a_score(cfg, params, corpus):
    tcfg = TrainConfig(epochs=1, batch_size=4, holdout_fraction=0.25)
    reports = train(params, cfg, corpus, tcfg)
    assert len(reports) == 1
    assert 0.0 <= reports[0].holdout_bleu <= 1.0


def test_training_is_deterministic(cfg, corpus):
    outs = []
    for _ in range(2):
        p = create_parameters(cfg, seed=1)
        reports = train(p, cfg, corpus,
                        TrainConfig(epochs=2, batch_size=4, seed=5,
                                    holdout_fraction=0.25))
        outs.append((reports, snapshot(p)))
    (ra, wa), (rb, wb) = outs
    assert ra == rb
    for name in wa:
        assert np.array_equal(wa[name], wb[name]), name


def test_non_finite_loss_aborts_naming_epoch_and_utterance(cfg, params, corpus):
    params["out_b"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError, match=r"epoch 1 on utt\d{4}"):
        train(params, cfg, corpus, TrainConfig(epochs=1, batch_size=4))


def test_epoch_callback_sees_each_report(cfg, params, corpus):
    seen = []
    train(params, cfg, corpus,
          TrainConfig(epochs=2, batch_size=6, holdout_fraction=0.0),
          on_epoch=seen.append)
    assert [r.epoch for r in seen] == [1, 2]
    assert all(isinstance(r, EpochReport) for r in seen)


def test_train_config_rejects_bad_settings():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(holdout_fraction=1.0)
