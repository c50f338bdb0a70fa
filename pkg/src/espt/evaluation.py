"""Inference protocol: original-branch prediction and many-task accuracy.

Prediction never touches the transform machinery; a trained model scores a
query episode with the reconstruction classifier on plain feature maps and
picks the most probable class. Accuracy over many sampled tasks is
reported with a 95% confidence interval (1.96 * sample std / sqrt(tasks)).

Tasks are independent given a frozen model: each task draws from its own
seed stream, so results do not depend on scheduling. ``ESPT_THREADS``
caps the worker pool (default 1).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from espt.backbone import forward
from espt.episodes import sample_episode
from espt.losses import reconstruct_episode
from espt.tensor import Tensor


@dataclass
class EvalReport:
    num_tasks: int
    task_accuracies: np.ndarray
    mean_accuracy: float
    ci95: float
    shape: tuple[int, int, int]
    seed: int

    def to_record(self):
        n, k, l = self.shape
        return json.dumps({
            "num_tasks": self.num_tasks,
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "n": n, "k": k, "l": l,
            "seed": self.seed,
        }, sort_keys=True)

    def table_row(self):
        n, k, l = self.shape
        return (f"{n},{k},{l},{self.num_tasks},"
                f"{self.mean_accuracy:.6f},{self.ci95:.6f},{self.seed}")


def confidence_interval(accuracies):
    """95% half-width: 1.96 * sample std (n-1 denominator) / sqrt(count)."""
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if accuracies.size < 2:
        return 0.0
    return float(1.96 * accuracies.std(ddof=1) / np.sqrt(accuracies.size))


def predict(model, episode):
    """Predicted label per query, using only the original branch.

    Support and query share one forward pass (one set of batch statistics);
    the prediction is the argmax of the temperature-scaled logits, which
    equals the argmax of the class probabilities.
    """
    images = np.concatenate([episode.support_images, episode.query_images])
    feats = forward(model.params, images, model.config)
    nk = episode.support_images.shape[0]
    support = Tensor(feats.data[:nk])
    query = Tensor(feats.data[nk:])
    logits, _ = reconstruct_episode(
        support, episode.support_labels, query, episode.n, model.lam_bar)
    gamma = model.params["temperature"].item()
    return np.argmax(gamma * logits.data, axis=1)


def evaluate(model, dataset, split, shape, num_tasks, seed):
    """Mean accuracy and CI over ``num_tasks`` sampled episodes.

    ``model`` is either a :class:`~espt.backbone.Model` or any callable
    mapping an episode to predicted labels. Each task runs on its own rng
    stream spawned from ``seed``, so the report is reproducible and
    independent of worker scheduling.
    """
    n, k, l = shape
    predict_fn = model if callable(model) else (lambda ep: predict(model, ep))
    children = np.random.SeedSequence(seed).spawn(num_tasks)

    def run_task(i):
        rng = np.random.default_rng(children[i])
        episode = sample_episode(dataset, split, n, k, l, rng)
        preds = predict_fn(episode)
        return float(np.mean(preds == episode.query_labels))

    workers = max(1, int(os.environ.get("ESPT_THREADS", "1")))
    if workers == 1:
        accuracies = np.array([run_task(i) for i in range(num_tasks)])
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accuracies = np.array(list(pool.map(run_task, range(num_tasks))))
    return EvalReport(
        num_tasks=num_tasks,
        task_accuracies=accuracies,
        mean_accuracy=float(accuracies.mean()),
        ci95=confidence_interval(accuracies),
        shape=(n, k, l),
        seed=seed,
    )
