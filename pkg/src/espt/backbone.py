"""Residual convolutional feature extractor producing spatial feature maps.

Each block runs its convolutions with per-batch per-channel affine
normalization and leaky-rectifier activations, adds an identity shortcut
(1x1 projection when the channel count changes), applies a final
activation and a 2x2 max-pool. There is no global pooling: the output is
an (h, w, d) grid of local feature vectors per image, optionally rescaled
by 1/sqrt(d).

The trainable softmax temperature lives alongside the backbone weights so
a checkpoint captures every learnable parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from espt import tensor as T
from espt.tensor import Tensor, read_tensor_blob, write_tensor_blob


class ConfigError(ValueError):
    """Raised for structurally invalid backbone configurations."""


_AFFINE_EPS = 1e-5
_LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class BlockSpec:
    filters: int
    convs: int = 2
    kernel: int = 3


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[BlockSpec, ...]
    input_size: int
    in_channels: int = 3
    rescale: bool = True

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        for i, b in enumerate(self.blocks):
            if b.filters < 1 or b.convs < 1:
                raise ConfigError(f"block {i}: filters and convs must be positive")
            if b.kernel < 1 or b.kernel % 2 == 0:
                raise ConfigError(f"block {i}: kernel must be odd and positive, got {b.kernel}")
        side = self.input_size
        for i in range(len(self.blocks)):
            if side < 2:
                raise ConfigError(
                    f"input size {self.input_size} pools away to nothing "
                    f"(side {side} before block {i})"
                )
            side //= 2

    @property
    def output_side(self):
        # Pooling floors odd sides, matching the 84 -> 42 -> 21 -> 10 -> 5
        # chain of the full-scale preset.
        side = self.input_size
        for _ in self.blocks:
            side //= 2
        return side

    @property
    def output_dim(self):
        return self.blocks[-1].filters

    def to_dict(self):
        return {
            "blocks": [[b.filters, b.convs, b.kernel] for b in self.blocks],
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "rescale": self.rescale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            blocks=tuple(BlockSpec(*b) for b in d["blocks"]),
            input_size=int(d["input_size"]),
            in_channels=int(d["in_channels"]),
            rescale=bool(d["rescale"]),
        )


def paper_config():
    """The full-scale preset: 4 blocks of 3x3 convs, 84px input, 5x5x640 output."""
    return BackboneConfig(
        blocks=tuple(BlockSpec(f, convs=3, kernel=3) for f in (64, 160, 320, 640)),
        input_size=84,
        in_channels=3,
    )


def toy_config(convs=2):
    """Desk-scale preset: 2 blocks, 16px grayscale input, 4x4x16 output."""
    return BackboneConfig(
        blocks=(BlockSpec(8, convs=convs), BlockSpec(16, convs=convs)),
        input_size=16,
        in_channels=1,
    )


def equivariant_config():
    """1x1-kernel variant whose forward commutes exactly with quarter turns."""
    return BackboneConfig(
        blocks=(BlockSpec(8, convs=1, kernel=1), BlockSpec(16, convs=1, kernel=1)),
        input_size=16,
        in_channels=1,
    )


def init_params(config, seed, dtype=np.float64):
    """Fan-in-scaled random weights plus the temperature, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    params = {}
    cin = config.in_channels
    for i, block in enumerate(config.blocks):
        c = cin
        for j in range(block.convs):
            params[f"b{i}.conv{j}.w"] = Tensor(
                he((block.filters, c, block.kernel, block.kernel)), requires_grad=True)
            params[f"b{i}.conv{j}.scale"] = Tensor(
                np.ones(block.filters, dtype=dtype), requires_grad=True)
            params[f"b{i}.conv{j}.shift"] = Tensor(
                np.zeros(block.filters, dtype=dtype), requires_grad=True)
            c = block.filters
        if cin != block.filters:
            params[f"b{i}.proj.w"] = Tensor(
                he((block.filters, cin, 1, 1)), requires_grad=True)
            params[f"b{i}.proj.scale"] = Tensor(
                np.ones(block.filters, dtype=dtype), requires_grad=True)
            params[f"b{i}.proj.shift"] = Tensor(
                np.zeros(block.filters, dtype=dtype), requires_grad=True)
        cin = block.filters
    params["temperature"] = Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True)
    return params


def _batch_affine(x, scale, shift):
    """Normalize per channel with statistics of the current batch, then scale/shift."""
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    normed = centered / (var + _AFFINE_EPS).sqrt()
    c = scale.shape[0]
    return normed * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def forward(params, images, config):
    """Feature maps for a batch of images: (batch, c, s, s) -> (batch, h, w, d).

    The whole batch shares the per-batch normalization statistics. The
    forward is recorded for differentiation whenever the parameters require
    gradients.
    """
    dtype = params["temperature"].data.dtype
    x = T.as_tensor(images, dtype=dtype)
    if x.ndim != 4:
        raise ValueError(f"expected a (batch, c, s, s) image batch, got {x.shape}")
    if x.shape[1] != config.in_channels or x.shape[2] != x.shape[3] \
            or x.shape[2] != config.input_size:
        raise ValueError(
            f"image batch {x.shape[1:]} does not match configured input "
            f"{config.in_channels}x{config.input_size}x{config.input_size}"
        )
    cin = config.in_channels
    for i, block in enumerate(config.blocks):
        h = x
        for j in range(block.convs):
            h = T.conv2d(h, params[f"b{i}.conv{j}.w"])
            h = _batch_affine(h, params[f"b{i}.conv{j}.scale"], params[f"b{i}.conv{j}.shift"])
            if j < block.convs - 1:
                h = T.leaky_relu(h, _LEAKY_SLOPE)
        if cin != block.filters:
            shortcut = T.conv2d(x, params[f"b{i}.proj.w"])
            shortcut = _batch_affine(
                shortcut, params[f"b{i}.proj.scale"], params[f"b{i}.proj.shift"])
        else:
            shortcut = x
        x = T.maxpool2d(T.leaky_relu(h + shortcut, _LEAKY_SLOPE))
        cin = block.filters
    fmap = x.transpose(0, 2, 3, 1)
    if config.rescale:
        fmap = fmap * (1.0 / np.sqrt(config.output_dim))
    return fmap


# ------------------------------------------------------------------------
# Model bundle and checkpointing.
# ------------------------------------------------------------------------

@dataclass
class Model:
    """Everything inference needs: architecture, parameters, ridge control."""

    config: BackboneConfig
    params: dict[str, Tensor]
    lam_bar: float = 1.0
    extra: dict = field(default_factory=dict)

    def snapshot(self):
        """Frozen deep copy (gradient-free), safe to share across workers."""
        frozen = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return Model(self.config, frozen, self.lam_bar, dict(self.extra))

    def param_digest(self):
        import hashlib
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()


def save_checkpoint(out_dir, model):
    """Write a checkpoint directory: manifest plus one tensor blob per parameter."""
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, name in enumerate(sorted(model.params)):
        blob = f"tensors/{idx:04d}.bin"
        write_tensor_blob(out_dir / blob, model.params[name].data)
        entries.append({"name": name, "file": blob})
    manifest = {
        "config": model.config.to_dict(),
        "lam_bar": model.lam_bar,
        "params": entries,
        "extra": model.extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir / "manifest.json"


def load_checkpoint(ckpt_dir, trainable=False, dtype=np.float64):
    """Load a checkpoint saved by :func:`save_checkpoint`."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    config = BackboneConfig.from_dict(manifest["config"])
    params = {}
    for entry in manifest["params"]:
        arr = read_tensor_blob(ckpt_dir / entry["file"]).astype(dtype)
        params[entry["name"]] = Tensor(arr, requires_grad=trainable)
    return Model(config, params, float(manifest.get("lam_bar", 1.0)),
                 manifest.get("extra", {}))
