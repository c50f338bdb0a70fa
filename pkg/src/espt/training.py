"""Episodic training with a rotation-consistency auxiliary objective.

Each step samples an episode and one shared quarter-turn transform, runs
the original images and the rotated images through the shared feature
extractor, rotates the original-branch feature maps so the two spatial
grids align, and optimizes the classification loss plus ``alpha`` times
the coefficient-consistency loss with SGD (Nesterov momentum, weight
decay). Validation snapshots are taken periodically and the best one by
validation accuracy is returned.

Weight decay applies to convolution weights only; the temperature and the
per-channel affine parameters are exempt.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from espt.backbone import BackboneConfig, Model, forward, init_params
from espt.episodes import sample_episode
from espt.evaluation import evaluate
from espt.losses import (
    cross_entropy_from_logits,
    pretext_loss_batched,
    reconstruct_episode,
    total_loss,
)
from espt.tensor import Tensor, take
from espt.transforms import TransformSet, rotate_feature_map, sample_transform


class TrainingError(RuntimeError):
    """Raised when training cannot start or a step produces a non-finite loss."""


@dataclass(frozen=True)
class OptimizerConfig:
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01),)
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ValueError("lr schedule must start at epoch 0")
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"lr schedule epochs must be strictly increasing: {epochs}")
        if any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be positive")

    def rate_at(self, epoch):
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if epoch >= start:
                rate = r
        return rate


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 0
    batch_size: int = 128
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.1),)


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig
    n: int = 5
    k: int = 1
    l: int = 16
    transform_degrees: tuple[int, ...] = (90, 180, 270)
    lam_bar: float = 1.0
    alpha: float = 0.3
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 1
    episodes_per_epoch: int = 100
    validation_every: int = 10
    validation_tasks: int = 200
    val_shape: tuple[int, int, int] | None = None   # defaults to (n, k, l)
    seed: int = 0
    precision: str = "float64"
    pretrain: PretrainConfig = PretrainConfig()

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")
        if self.lam_bar <= 0:
            raise ValueError("lam_bar must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        TransformSet.from_degrees(self.transform_degrees)  # validates

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def transform_set(self):
        return TransformSet.from_degrees(self.transform_degrees)


@dataclass
class TrainState:
    model: Model
    velocity: dict[str, np.ndarray]
    iteration: int = 0
    epoch: int = 0
    best_model: Model | None = None
    best_val_acc: float = field(default=-math.inf)


@dataclass
class TrainResult:
    best: Model
    final: Model
    log: list


def _decays(name):
    return name.endswith(".w")


def sgd_update(params, velocity, lr, momentum, weight_decay):
    """One SGD step with Nesterov momentum, as implemented by the common
    deep-learning frameworks::

        g = grad + weight_decay * p     (decay only for conv weights)
        v = momentum * v + g
        p = p - lr * (g + momentum * v)

    Consumes and clears ``.grad`` on every parameter.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and _decays(name):
            g = g + weight_decay * p.data
        v = velocity[name]
        v *= momentum
        v += g
        p.data = p.data - lr * (g + momentum * v)
        p.grad = None


def _episode_branches(params, episode, turns, config):
    """Aligned feature maps for both branches of one episode.

    Original branch: plain images through the extractor, feature maps then
    rotated. Transformed branch: rotated images through the extractor.
    """
    backbone = config.backbone
    dtype = config.dtype
    images = np.concatenate([episode.support_images, episode.query_images])
    images = np.ascontiguousarray(images, dtype=dtype)
    nk = episode.support_images.shape[0]
    nq = episode.query_images.shape[0]

    feats = forward(params, images, backbone)
    sup = rotate_feature_map(take(feats, np.arange(nk)), turns)
    qry = rotate_feature_map(take(feats, nk + np.arange(nq)), turns)

    rotated_images = np.ascontiguousarray(np.rot90(images, turns, axes=(2, 3)))
    feats_t = forward(params, rotated_images, backbone)
    sup_t = take(feats_t, np.arange(nk))
    qry_t = take(feats_t, nk + np.arange(nq))
    return (sup, qry), (sup_t, qry_t)


def episode_losses(params, episode, turns, config, stop_gradient=True):
    """Classification, pretext and total loss tensors for one episode."""
    (sup, qry), (sup_t, qry_t) = _episode_branches(params, episode, turns, config)
    logits, coeffs = reconstruct_episode(
        sup, episode.support_labels, qry, episode.n, config.lam_bar)
    l_class = cross_entropy_from_logits(
        logits, episode.query_labels, params["temperature"])
    _, coeffs_t = reconstruct_episode(
        sup_t, episode.support_labels, qry_t, episode.n, config.lam_bar)
    l_pretext = pretext_loss_batched(coeffs, coeffs_t, stop_gradient=stop_gradient)
    l_total = total_loss(l_class, l_pretext, config.alpha)
    return l_class, l_pretext, l_total, logits


def train_step(state, episode, turns, config):
    """One optimization step; mutates ``state`` and returns the step metrics."""
    params = state.model.params
    lr = config.optimizer.rate_at(state.epoch)

    if config.alpha > 0:
        l_class, l_pretext, l_total, logits = episode_losses(
            params, episode, turns, config)
        pretext_value = l_pretext.item()
    else:
        images = np.concatenate([episode.support_images, episode.query_images])
        images = np.ascontiguousarray(images, dtype=config.dtype)
        nk = episode.support_images.shape[0]
        feats = forward(params, images, config.backbone)
        sup = rotate_feature_map(take(feats, np.arange(nk)), turns)
        qry = rotate_feature_map(
            take(feats, nk + np.arange(episode.query_images.shape[0])), turns)
        logits, _ = reconstruct_episode(
            sup, episode.support_labels, qry, episode.n, config.lam_bar)
        l_class = cross_entropy_from_logits(
            logits, episode.query_labels, params["temperature"])
        l_total = l_class
        pretext_value = 0.0

    class_value = l_class.item()
    total_value = l_total.item()
    if not math.isfinite(total_value):
        raise TrainingError(
            f"non-finite loss at iteration {state.iteration}: "
            f"l_class={class_value}, l_pretext={pretext_value}, "
            f"temperature={params['temperature'].item()}, lr={lr}"
        )
    l_total.backward()
    sgd_update(params, state.velocity, lr,
               config.optimizer.momentum, config.optimizer.weight_decay)

    gamma = params["temperature"].item()
    preds = np.argmax(gamma * logits.data, axis=1)
    accuracy = float(np.mean(preds == episode.query_labels))
    state.iteration += 1
    return {
        "iteration": state.iteration,
        "epoch": state.epoch,
        "l_class": class_value,
        "l_pretext": pretext_value,
        "l_total": total_value,
        "query_acc": accuracy,
    }


def _seed_streams(seed):
    init_ss, episode_ss, transform_ss, val_ss, pretrain_ss = \
        np.random.SeedSequence(seed).spawn(5)
    return {
        "init": int(init_ss.generate_state(1)[0]),
        "episodes": episode_ss,
        "transforms": transform_ss,
        "val": int(val_ss.generate_state(1)[0]),
        "pretrain": pretrain_ss,
    }


def _check_split(dataset, split, n, k, l, context):
    ids = dataset.split_classes(split)
    if len(ids) < n:
        raise TrainingError(
            f"{context}: split {split!r} has {len(ids)} classes, "
            f"need {n} for {n}-way episodes")
    short = [cid for cid in ids if dataset.images[cid].shape[0] < k + l]
    if short:
        raise TrainingError(
            f"{context}: class {short[0]} has fewer than k+l={k + l} samples")


def train(config, dataset, log_path=None):
    """Run the full episodic loop; returns a :class:`TrainResult`.

    The metrics log holds one record per step (losses and train-query
    accuracy, plus validation accuracy on steps where validation ran); with
    ``log_path`` the records are also appended to disk as JSON lines.
    ``result.best`` is the snapshot with the highest validation accuracy,
    or the final parameters if validation never ran.
    """
    streams = _seed_streams(config.seed)
    _check_split(dataset, "train", config.n, config.k, config.l, "train")
    val_shape = config.val_shape or (config.n, config.k, config.l)
    validate = (config.validation_every > 0 and config.validation_tasks > 0
                and len(dataset.split_classes("val")) > 0)
    if validate:
        _check_split(dataset, "val", *val_shape, "validation")

    if config.pretrain.epochs > 0:
        params, _ = pretrain(config, dataset)
    else:
        params = init_params(config.backbone, streams["init"], dtype=config.dtype)
    model = Model(config.backbone, params, config.lam_bar)
    state = TrainState(
        model=model,
        velocity={k: np.zeros_like(v.data) for k, v in params.items()},
    )
    episode_rng = np.random.default_rng(streams["episodes"])
    transform_rng = np.random.default_rng(streams["transforms"])
    tset = config.transform_set

    log = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            for i in range(config.episodes_per_epoch):
                episode = sample_episode(
                    dataset, "train", config.n, config.k, config.l, episode_rng)
                turns = sample_transform(tset, transform_rng)
                metrics = train_step(state, episode, turns, config)
                last_of_epoch = i == config.episodes_per_epoch - 1
                if validate and last_of_epoch \
                        and (epoch + 1) % config.validation_every == 0:
                    snapshot = state.model.snapshot()
                    report = evaluate(
                        snapshot, dataset, "val", val_shape,
                        config.validation_tasks, streams["val"])
                    metrics["val_acc"] = report.mean_accuracy
                    if report.mean_accuracy > state.best_val_acc:
                        state.best_val_acc = report.mean_accuracy
                        state.best_model = snapshot
                log.append(metrics)
                if log_file:
                    log_file.write(json.dumps(metrics, sort_keys=True) + "\n")
    finally:
        if log_file:
            log_file.close()
    final = model.snapshot()
    best = state.best_model if state.best_model is not None else final
    return TrainResult(best=best, final=final, log=log)


def pretrain(config, dataset):
    """Whole-classifier warmup over all base classes.

    Standard mini-batch cross-entropy with a linear head on globally
    average-pooled features; the head is discarded. Returns ``(params,
    records)`` where params are ready for :func:`train` (which runs this
    automatically when ``config.pretrain.epochs > 0``).
    """
    streams = _seed_streams(config.seed)
    dtype = config.dtype
    params = init_params(config.backbone, streams["init"], dtype=dtype)
    records = []
    if config.pretrain.epochs == 0:
        return params, records

    base_ids = sorted(dataset.split_classes("train"))
    if not base_ids:
        raise TrainingError("pretrain: train split is empty")
    pairs = [(cid, idx) for cid in base_ids
             for idx in range(dataset.images[cid].shape[0])]
    labels_of = {cid: i for i, cid in enumerate(base_ids)}
    d = config.backbone.output_dim
    rng = np.random.default_rng(streams["pretrain"])
    head_w = Tensor((rng.normal(size=(d, len(base_ids)))
                     * np.sqrt(1.0 / d)).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(len(base_ids), dtype=dtype), requires_grad=True)
    trainable = dict(params)
    trainable["head.w"] = head_w
    trainable["head.shift"] = head_b      # affine-style name: exempt from decay
    velocity = {k: np.zeros_like(v.data) for k, v in trainable.items()}
    schedule = OptimizerConfig(
        lr_schedule=config.pretrain.lr_schedule,
        momentum=config.optimizer.momentum,
        weight_decay=config.optimizer.weight_decay,
    )

    iteration = 0
    for epoch in range(config.pretrain.epochs):
        lr = schedule.rate_at(epoch)
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.pretrain.batch_size):
            batch = [pairs[j] for j in order[start:start + config.pretrain.batch_size]]
            images = np.stack([dataset.images[cid][idx] for cid, idx in batch])
            labels = np.array([labels_of[cid] for cid, _ in batch])
            feats = forward(params, images.astype(dtype), config.backbone)
            pooled = feats.mean(axis=(1, 2))
            logits = pooled @ head_w + head_b
            loss = cross_entropy_from_logits(logits, labels, gamma=1.0)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite pretrain loss at iteration {iteration}")
            loss.backward()
            sgd_update(trainable, velocity, lr,
                       schedule.momentum, schedule.weight_decay)
            records.append({"iteration": iteration, "epoch": epoch, "loss": value})
            iteration += 1
    return params, records


def with_overrides(config, **kwargs):
    """Convenience wrapper around dataclasses.replace for sweep variants."""
    return replace(config, **kwargs)
