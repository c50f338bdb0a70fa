"""Run configuration files.

INI-style sections with Python-literal values (lists like ``[90, 270]``,
booleans as ``true``/``false``, bare strings for paths and names). Every
known key has a stated default; unknown sections or keys are rejected so a
typo cannot silently fall back to a default. Referenced input paths are
resolved relative to the config file and must exist at parse time.

``parse_run_config`` and ``run_config_to_text`` round-trip: a parsed
config, re-serialized with its defaults expanded and parsed again, is
equal to the original.
"""

from __future__ import annotations

import ast
import configparser
import io
from dataclasses import dataclass
from pathlib import Path

from espt.backbone import BackboneConfig, BlockSpec, ConfigError
from espt.episodes import SyntheticSpec
from espt.training import OptimizerConfig, PretrainConfig, TrainConfig


@dataclass(frozen=True)
class SweepSettings:
    axis: str
    values: tuple
    seeds: tuple[int, ...]
    eval_tasks: int


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    dataset_manifest: Path | None
    output_dir: Path
    eval_split: str
    eval_shape: tuple[int, int, int]
    eval_tasks: int
    eval_seed: int
    sweep: SweepSettings | None


def _parse_value(text):
    stripped = text.strip()
    lowered = stripped.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", ""):
        return None
    try:
        return ast.literal_eval(stripped)
    except (ValueError, SyntaxError):
        return stripped


def _value_text(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_value_text(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SCHEMA = {
    "dataset": {"manifest": None},
    "backbone": {
        "blocks": [[8, 2, 3], [16, 2, 3]],
        "input_size": 16,
        "in_channels": 1,
        "rescale": True,
    },
    "episode": {"n": 4, "k": 1, "l": 4},
    "transforms": {"rotations": [90, 180, 270]},
    "loss": {"lambda_bar": 1.0, "alpha": 0.3},
    "optimizer": {
        "lr_schedule": [[0, 0.01]],
        "momentum": 0.9,
        "weight_decay": 0.0005,
    },
    "train": {
        "epochs": 20,
        "episodes_per_epoch": 100,
        "validation_every": 10,
        "validation_tasks": 200,
        "precision": "float64",
        "seed": 0,
    },
    "pretrain": {"epochs": 0, "batch_size": 128, "lr_schedule": [[0, 0.1]]},
    "eval": {"split": "test", "n": None, "k": None, "l": None,
             "num_tasks": 1000, "seed": 0},
    "sweep": {"axis": None, "values": None, "seeds": None, "eval_tasks": None},
    "output": {"dir": "runs/out"},
}

_SYNTHETIC_SCHEMA = {
    "synthetic": {
        "num_classes": 8,
        "samples_per_class": 40,
        "image_side": 16,
        "seed": 0,
        "channels": 1,
        "split": None,
    },
}


def _read_sections(text, schema, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(source))
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}")
    values = {s: dict(defaults) for s, defaults in schema.items()}
    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in schema[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(raw)
    return values


def _pairs(raw, context):
    try:
        return tuple((int(e), float(r)) for e, r in raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{context} must be a list of [epoch, rate] pairs, got {raw!r}")


def parse_run_config(path=None, text=None):
    """Parse a run config from a file (or directly from text, for tests)."""
    if text is None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        base = path.parent
        source = path
    else:
        base = Path.cwd()
        source = "<config>"
    v = _read_sections(text, _SCHEMA, source)

    try:
        backbone = BackboneConfig(
            blocks=tuple(BlockSpec(int(f), int(c), int(k))
                         for f, c, k in v["backbone"]["blocks"]),
            input_size=int(v["backbone"]["input_size"]),
            in_channels=int(v["backbone"]["in_channels"]),
            rescale=bool(v["backbone"]["rescale"]),
        )
        train = TrainConfig(
            backbone=backbone,
            n=int(v["episode"]["n"]),
            k=int(v["episode"]["k"]),
            l=int(v["episode"]["l"]),
            transform_degrees=tuple(int(d) for d in v["transforms"]["rotations"]),
            lam_bar=float(v["loss"]["lambda_bar"]),
            alpha=float(v["loss"]["alpha"]),
            optimizer=OptimizerConfig(
                lr_schedule=_pairs(v["optimizer"]["lr_schedule"],
                                   "[optimizer] lr_schedule"),
                momentum=float(v["optimizer"]["momentum"]),
                weight_decay=float(v["optimizer"]["weight_decay"]),
            ),
            epochs=int(v["train"]["epochs"]),
            episodes_per_epoch=int(v["train"]["episodes_per_epoch"]),
            validation_every=int(v["train"]["validation_every"]),
            validation_tasks=int(v["train"]["validation_tasks"]),
            seed=int(v["train"]["seed"]),
            precision=str(v["train"]["precision"]),
            pretrain=PretrainConfig(
                epochs=int(v["pretrain"]["epochs"]),
                batch_size=int(v["pretrain"]["batch_size"]),
                lr_schedule=_pairs(v["pretrain"]["lr_schedule"],
                                   "[pretrain] lr_schedule"),
            ),
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{source}: {err}")

    manifest = v["dataset"]["manifest"]
    if manifest is not None:
        manifest = (base / str(manifest)).resolve()
        if not manifest.exists():
            raise ConfigError(f"{source}: dataset manifest not found: {manifest}")

    eval_shape = (
        int(v["eval"]["n"] if v["eval"]["n"] is not None else train.n),
        int(v["eval"]["k"] if v["eval"]["k"] is not None else train.k),
        int(v["eval"]["l"] if v["eval"]["l"] is not None else train.l),
    )

    sweep = None
    sw = v["sweep"]
    if sw["axis"] is not None:
        if sw["values"] is None or sw["seeds"] is None:
            raise ConfigError(f"{source}: [sweep] needs axis, values and seeds")
        values = sw["values"]
        if sw["axis"] == "transforms":
            values = tuple(tuple(int(d) for d in entry) for entry in values)
        else:
            values = tuple(float(x) for x in values)
        sweep = SweepSettings(
            axis=str(sw["axis"]),
            values=values,
            seeds=tuple(int(s) for s in sw["seeds"]),
            eval_tasks=int(sw["eval_tasks"] if sw["eval_tasks"] is not None
                           else v["eval"]["num_tasks"]),
        )

    return RunConfig(
        train=train,
        dataset_manifest=manifest,
        output_dir=(base / str(v["output"]["dir"])).resolve(),
        eval_split=str(v["eval"]["split"]),
        eval_shape=eval_shape,
        eval_tasks=int(v["eval"]["num_tasks"]),
        eval_seed=int(v["eval"]["seed"]),
        sweep=sweep,
    )


def run_config_to_text(rc):
    """Serialize with every default expanded, for reproducible run records."""
    t = rc.train
    sections = {
        "dataset": {"manifest": str(rc.dataset_manifest)
                    if rc.dataset_manifest else None},
        "backbone": {
            "blocks": [[b.filters, b.convs, b.kernel] for b in t.backbone.blocks],
            "input_size": t.backbone.input_size,
            "in_channels": t.backbone.in_channels,
            "rescale": t.backbone.rescale,
        },
        "episode": {"n": t.n, "k": t.k, "l": t.l},
        "transforms": {"rotations": list(t.transform_degrees)},
        "loss": {"lambda_bar": t.lam_bar, "alpha": t.alpha},
        "optimizer": {
            "lr_schedule": [[e, r] for e, r in t.optimizer.lr_schedule],
            "momentum": t.optimizer.momentum,
            "weight_decay": t.optimizer.weight_decay,
        },
        "train": {
            "epochs": t.epochs,
            "episodes_per_epoch": t.episodes_per_epoch,
            "validation_every": t.validation_every,
            "validation_tasks": t.validation_tasks,
            "precision": t.precision,
            "seed": t.seed,
        },
        "pretrain": {
            "epochs": t.pretrain.epochs,
            "batch_size": t.pretrain.batch_size,
            "lr_schedule": [[e, r] for e, r in t.pretrain.lr_schedule],
        },
        "eval": {
            "split": rc.eval_split,
            "n": rc.eval_shape[0], "k": rc.eval_shape[1], "l": rc.eval_shape[2],
            "num_tasks": rc.eval_tasks,
            "seed": rc.eval_seed,
        },
        "output": {"dir": str(rc.output_dir)},
    }
    if rc.sweep is not None:
        sections["sweep"] = {
            "axis": rc.sweep.axis,
            "values": [list(x) if isinstance(x, tuple) else x
                       for x in rc.sweep.values],
            "seeds": list(rc.sweep.seeds),
            "eval_tasks": rc.sweep.eval_tasks,
        }
    out = io.StringIO()
    for section, keys in sections.items():
        out.write(f"[{section}]\n")
        for key, value in keys.items():
            if value is None:
                continue
            out.write(f"{key} = {_value_text(value)}\n")
        out.write("\n")
    return out.getvalue()


def write_run_config(rc, path):
    Path(path).write_text(run_config_to_text(rc))


def parse_synthetic_config(path):
    """Parse a dataset-generation spec ([synthetic] section)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    v = _read_sections(path.read_text(), _SYNTHETIC_SCHEMA, path)["synthetic"]
    split = v["split"]
    try:
        return SyntheticSpec(
            num_classes=int(v["num_classes"]),
            samples_per_class=int(v["samples_per_class"]),
            image_side=int(v["image_side"]),
            seed=int(v["seed"]),
            channels=int(v["channels"]),
            split_counts=tuple(int(c) for c in split) if split is not None else None,
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{path}: {err}")
