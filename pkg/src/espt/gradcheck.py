"""Central finite-difference gradient checking.

The checker re-evaluates a loss closure with individual coordinates of the
parameter arrays nudged by ±step, so it is independent of the recorded
backward passes it is used to validate.

The episode-level harness checks the classification, consistency and total
losses at once. The consistency loss stops gradients at the
original-branch coefficients, so the function its gradient differentiates
treats those reference coefficients as constants; the probe therefore
freezes them at the unperturbed parameters before differencing.
"""

from __future__ import annotations

import numpy as np


def finite_difference(loss_fn, params, step=1e-4):
    """Central-difference gradients of ``loss_fn`` w.r.t. each param array.

    ``params`` maps names to tensors (anything with a mutable ``.data``
    ndarray). ``loss_fn`` takes no arguments, recomputes the loss from the
    current parameter values, and returns a float or a 1-d array of floats
    (several losses share the two evaluations per coordinate). Returns a
    dict of arrays shaped like the parameters, with a leading loss axis
    when ``loss_fn`` returns more than one value.
    """
    base = np.atleast_1d(np.asarray(loss_fn(), dtype=np.float64))
    grads = {}
    for name, t in params.items():
        arr = t.data
        g = np.zeros((base.size,) + arr.shape)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = np.atleast_1d(np.asarray(loss_fn(), dtype=np.float64))
            arr[idx] = orig - step
            lo = np.atleast_1d(np.asarray(loss_fn(), dtype=np.float64))
            arr[idx] = orig
            g[(slice(None),) + idx] = (hi - lo) / (2.0 * step)
            it.iternext()
        grads[name] = g[0] if base.size == 1 else g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst per-coordinate relative deviation between two gradients.

    The denominator is floored so that coordinates whose true gradient sits
    below the finite-difference noise floor do not dominate.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


LOSS_NAMES = ("l_class", "l_pretext", "l_total")


def episode_gradients(params, episode, turns, config):
    """Recorded-backward gradients of all three losses for every parameter.

    Returns ``{loss_name: {param_name: array}}``. Each loss gets its own
    graph so the three gradient sets stay independent.
    """
    from espt.training import episode_losses

    out = {}
    for key in LOSS_NAMES:
        losses = episode_losses(params, episode, turns, config)
        loss = dict(zip(LOSS_NAMES, losses[:3]))[key]
        loss.backward()
        out[key] = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
        for p in params.values():
            p.grad = None
    return out


def episode_loss_probe(params, episode, turns, config):
    """Closure returning (l_class, l_pretext, l_total) as floats for FD.

    The reference coefficients of the consistency loss are frozen at the
    current parameter values, matching the stop-gradient semantics.
    """
    from espt.losses import (
        cross_entropy_from_logits,
        pretext_loss_batched,
        reconstruct_episode,
    )
    from espt.tensor import Tensor
    from espt.training import _episode_branches

    (sup, qry), _ = _episode_branches(params, episode, turns, config)
    _, coeffs = reconstruct_episode(
        sup, episode.support_labels, qry, episode.n, config.lam_bar)
    frozen_reference = Tensor(coeffs.data.copy())

    def probe():
        (sup, qry), (sup_t, qry_t) = _episode_branches(params, episode, turns, config)
        logits, _ = reconstruct_episode(
            sup, episode.support_labels, qry, episode.n, config.lam_bar)
        l_class = cross_entropy_from_logits(
            logits, episode.query_labels, params["temperature"]).item()
        _, coeffs_t = reconstruct_episode(
            sup_t, episode.support_labels, qry_t, episode.n, config.lam_bar)
        l_pretext = pretext_loss_batched(frozen_reference, coeffs_t).item()
        return np.array([l_class, l_pretext, l_class + config.alpha * l_pretext])

    return probe


def default_gradcheck_config():
    """A deliberately small setup so the full coordinate sweep stays quick."""
    from espt.backbone import BackboneConfig, BlockSpec
    from espt.training import TrainConfig

    backbone = BackboneConfig(
        blocks=(BlockSpec(4, convs=1), BlockSpec(8, convs=1)),
        input_size=16, in_channels=1)
    return TrainConfig(backbone=backbone, n=2, k=1, l=2, alpha=0.3,
                       epochs=0, precision="float64", seed=0)


def toy_gradcheck_episode(config, rng):
    """A toy episode of smooth Gaussian images.

    Rendered pattern images contain exact-constant plateaus, which produce
    exact ties inside the pooling windows; at a tie the loss is not
    differentiable and finite differences straddle the two subgradients.
    Gaussian images make ties a measure-zero event.
    """
    from espt.episodes import Episode

    c = config.backbone.in_channels
    s = config.backbone.input_size
    n, k, l = config.n, config.k, config.l
    return Episode(
        n=n, k=k, l=l,
        support_images=rng.normal(size=(n * k, c, s, s)),
        support_labels=np.repeat(np.arange(n), k),
        query_images=rng.normal(size=(n * l, c, s, s)),
        query_labels=np.repeat(np.arange(n), l),
        class_ids=tuple(range(n)),
    )


def run_model_gradcheck(config=None, step=1e-4, floor=1e-6, seed=6):
    """Check every parameter's gradient on one toy episode.

    Returns rows ``(loss_name, param_name, max_relative_error)`` for the
    classification, consistency and total losses. The loss is only
    piecewise differentiable (pooling argmax, rectifier kinks), so the
    probe episode seed is chosen so the probe point sits safely inside a
    smooth region at the given step; with an unlucky seed a finite
    difference can straddle a kink and report a spurious mismatch.
    """
    from espt.backbone import init_params
    from espt.transforms import sample_transform

    config = config or default_gradcheck_config()
    if config.precision != "float64":
        raise ValueError("gradient checking requires float64 precision")
    rng = np.random.default_rng(seed)
    episode = toy_gradcheck_episode(config, rng)
    turns = sample_transform(config.transform_set, rng)
    params = init_params(config.backbone, seed)

    analytic = episode_gradients(params, episode, turns, config)
    numeric = finite_difference(
        episode_loss_probe(params, episode, turns, config), params, step=step)
    rows = []
    for i, loss_name in enumerate(LOSS_NAMES):
        for param_name in sorted(params):
            err = max_relative_error(
                analytic[loss_name][param_name], numeric[param_name][i], floor)
            rows.append((loss_name, param_name, err))
    return rows
