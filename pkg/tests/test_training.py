import json
import math

import numpy as np
import pytest

from espt.backbone import Model, forward, init_params, toy_config
from espt.episodes import SyntheticSpec, generate_synthetic, sample_episode
from espt.losses import (
    cross_entropy_from_logits,
    reconstruct_episode,
)
from espt.tensor import Tensor, take
from espt.training import (
    OptimizerConfig,
    PretrainConfig,
    TrainConfig,
    TrainState,
    TrainingError,
    episode_losses,
    pretrain,
    sgd_update,
    train,
    train_step,
)
from espt.transforms import rotate_feature_map


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SyntheticSpec(
        num_classes=8, samples_per_class=12, image_side=16, seed=0))


def small_config(**overrides):
    defaults = dict(
        backbone=toy_config(),
        n=2, k=1, l=2,
        transform_degrees=(90, 180, 270),
        lam_bar=1.0,
        alpha=0.3,
        optimizer=OptimizerConfig(lr_schedule=((0, 0.01),)),
        epochs=1,
        episodes_per_epoch=3,
        validation_every=0,
        validation_tasks=0,
        seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def fresh_state(config, seed=123):
    params = init_params(config.backbone, seed, dtype=config.dtype)
    model = Model(config.backbone, params, config.lam_bar)
    return TrainState(model=model,
                      velocity={k: np.zeros_like(v.data) for k, v in params.items()})


# -------------------------------------------------------------- optimizer


def test_nesterov_three_steps_match_hand_computation():
    # f(p) = p^2, grad = 2p; lr=0.1, momentum=0.9, no decay.
    lr, mu = 0.1, 0.9
    p = Tensor(np.asarray(1.0), requires_grad=True)
    params = {"head.w": p}           # .w name, but decay disabled here
    velocity = {"head.w": np.zeros(())}

    theta, v = 1.0, 0.0
    for _ in range(3):
        loss = p * p
        loss.backward()
        sgd_update(params, velocity, lr, mu, weight_decay=0.0)
        g = 2.0 * theta
        v = mu * v + g
        theta = theta - lr * (g + mu * v)
        assert abs(p.item() - theta) < 1e-15
        assert abs(float(velocity["head.w"]) - v) < 1e-15


def test_schedule_lookup():
    opt = OptimizerConfig(lr_schedule=((0, 0.1), (2, 0.01), (5, 0.001)))
    assert opt.rate_at(0) == 0.1
    assert opt.rate_at(1) == 0.1
    assert opt.rate_at(2) == 0.01
    assert opt.rate_at(7) == 0.001


def test_schedule_validation():
    with pytest.raises(ValueError, match="start at epoch 0"):
        OptimizerConfig(lr_schedule=((1, 0.1),))
    with pytest.raises(ValueError, match="strictly increasing"):
        OptimizerConfig(lr_schedule=((0, 0.1), (0, 0.01)))
    with pytest.raises(ValueError, match="positive"):
        OptimizerConfig(lr_schedule=((0, -0.1),))


def test_weight_decay_touches_only_conv_weights():
    cfg = small_config()
    params = init_params(cfg.backbone, 7)
    before = {k: v.data.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    # zero gradients: any movement comes from decay alone
    sgd_update(params, velocity, lr=0.5, momentum=0.9, weight_decay=0.1)
    for name, p in params.items():
        if name.endswith(".w"):
            assert not np.array_equal(p.data, before[name]), name
        else:
            np.testing.assert_array_equal(p.data, before[name]), name


# -------------------------------------------------------------- train_step


def test_lr_zero_keeps_parameters(dataset):
    cfg = small_config(optimizer=OptimizerConfig(lr_schedule=((0, 1e-30),)))
    state = fresh_state(cfg)
    before = {k: v.data.copy() for k, v in state.model.params.items()}
    ep = sample_episode(dataset, "train", 2, 1, 2, np.random.default_rng(0))
    metrics = train_step(state, ep, 1, cfg)
    for key in ("l_class", "l_pretext", "l_total", "query_acc"):
        assert key in metrics
    for name, p in state.model.params.items():
        np.testing.assert_allclose(p.data, before[name], atol=1e-25)


def test_alpha_zero_matches_classification_only_update(dataset):
    cfg = small_config(alpha=0.0)
    ep = sample_episode(dataset, "train", 2, 1, 2, np.random.default_rng(1))
    turns = 2

    state = fresh_state(cfg, seed=11)
    train_step(state, ep, turns, cfg)

    # Hand-rolled classification-only step on identical initialization.
    params = init_params(cfg.backbone, 11, dtype=cfg.dtype)
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    images = np.concatenate([ep.support_images, ep.query_images])
    feats = forward(params, images, cfg.backbone)
    sup = rotate_feature_map(take(feats, np.arange(2)), turns)
    qry = rotate_feature_map(take(feats, 2 + np.arange(4)), turns)
    logits, _ = reconstruct_episode(sup, ep.support_labels, qry, 2, cfg.lam_bar)
    loss = cross_entropy_from_logits(logits, ep.query_labels, params["temperature"])
    loss.backward()
    sgd_update(params, velocity, cfg.optimizer.rate_at(0),
               cfg.optimizer.momentum, cfg.optimizer.weight_decay)

    for name in params:
        np.testing.assert_array_equal(state.model.params[name].data, params[name].data)


def test_one_step_decreases_episode_loss(dataset):
    cfg = small_config(alpha=0.3,
                       optimizer=OptimizerConfig(lr_schedule=((0, 1e-3),),
                                                 weight_decay=0.0))
    state = fresh_state(cfg, seed=3)
    ep = sample_episode(dataset, "train", 2, 1, 2, np.random.default_rng(5))
    turns = 1
    _, _, before, _ = episode_losses(state.model.params, ep, turns, cfg)
    train_step(state, ep, turns, cfg)
    _, _, after, _ = episode_losses(state.model.params, ep, turns, cfg)
    assert after.item() < before.item()


def test_classification_invariant_to_shared_rotation(dataset):
    # Rotating every feature map in the episode permutes the class-matrix
    # rows and the query locations together, leaving the logits unchanged.
    cfg = small_config()
    params = init_params(cfg.backbone, 2)
    ep = sample_episode(dataset, "train", 2, 1, 2, np.random.default_rng(7))
    images = np.concatenate([ep.support_images, ep.query_images])
    feats = forward(params, images, cfg.backbone)
    sup, qry = take(feats, np.arange(2)), take(feats, 2 + np.arange(4))
    plain, _ = reconstruct_episode(sup, ep.support_labels, qry, 2, 1.0)
    rotated, _ = reconstruct_episode(
        rotate_feature_map(sup, 1), ep.support_labels,
        rotate_feature_map(qry, 1), 2, 1.0)
    np.testing.assert_allclose(plain.data, rotated.data, rtol=1e-9)


def test_non_finite_loss_aborts_with_diagnostics(dataset):
    cfg = small_config()
    state = fresh_state(cfg)
    state.model.params["temperature"].data = np.asarray(float("nan"))
    ep = sample_episode(dataset, "train", 2, 1, 2, np.random.default_rng(2))
    with pytest.raises(TrainingError, match="l_class"):
        train_step(state, ep, 1, cfg)


# ------------------------------------------------------------------ train


def test_epochs_zero_returns_initialized_model(dataset):
    cfg = small_config(epochs=0)
    result = train(cfg, dataset)
    assert result.log == []
    reference = init_params(cfg.backbone, 0)  # not the same seed derivation
    assert result.best.params.keys() == reference.keys()
    assert result.best.param_digest() == result.final.param_digest()


def test_train_is_deterministic(tmp_path, dataset):
    cfg = small_config(epochs=2, episodes_per_epoch=4,
                       validation_every=2, validation_tasks=10)
    ds = generate_synthetic(SyntheticSpec(
        num_classes=8, samples_per_class=12, image_side=16, seed=1))
    path_a, path_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    res_a = train(cfg, ds, log_path=path_a)
    res_b = train(cfg, ds, log_path=path_b)
    assert path_a.read_text() == path_b.read_text()
    assert res_a.log == res_b.log
    assert res_a.best.param_digest() == res_b.best.param_digest()


def test_validation_records_and_snapshot(dataset):
    cfg = small_config(epochs=2, episodes_per_epoch=2,
                       validation_every=1, validation_tasks=8)
    result = train(cfg, dataset)
    val_records = [m for m in result.log if "val_acc" in m]
    assert len(val_records) == 2
    assert 0.0 <= val_records[0]["val_acc"] <= 1.0


def test_train_rejects_impossible_shape(dataset):
    cfg = small_config(n=7)
    with pytest.raises(TrainingError, match="7-way"):
        train(cfg, dataset)


def test_metrics_log_is_json_lines(tmp_path, dataset):
    cfg = small_config(epochs=1, episodes_per_epoch=2)
    path = tmp_path / "log.jsonl"
    train(cfg, dataset, log_path=path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 2
    for line in lines:
        record = json.loads(line)
        assert {"iteration", "l_class", "l_pretext", "l_total",
                "query_acc"} <= set(record)


# --------------------------------------------------------------- pretrain


def test_pretrain_zero_epochs_returns_fresh_init(dataset):
    cfg = small_config()
    params, records = pretrain(cfg, dataset)
    assert records == []
    direct, _ = pretrain(cfg, dataset)
    for name in params:
        np.testing.assert_array_equal(params[name].data, direct[name].data)


def test_pretrain_first_batch_loss_near_log_num_classes(dataset):
    cfg = small_config(pretrain=PretrainConfig(
        epochs=1, batch_size=16, lr_schedule=((0, 0.01),)))
    _, records = pretrain(cfg, dataset)
    expected = math.log(len(dataset.splits["train"]))
    assert abs(records[0]["loss"] - expected) / expected < 0.2


def test_pretrained_params_feed_training(dataset):
    cfg = small_config(epochs=1, episodes_per_epoch=1,
                       pretrain=PretrainConfig(epochs=1, batch_size=24,
                                               lr_schedule=((0, 0.01),)))
    result = train(cfg, dataset)
    assert len(result.log) == 1
    assert "temperature" in result.best.params
