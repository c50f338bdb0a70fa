"""Datasets with disjoint class splits and n-way k-shot episode sampling.

A dataset maps class ids to image stacks and partitions the ids into
train/val/test splits. Episodes carry episode-local labels (0..n-1) plus
the (class id, sample index) provenance of every image so tests can check
support/query disjointness exhaustively.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from espt.tensor import read_tensor_blob, write_tensor_blob

SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised when a dataset or manifest violates its invariants."""


class SamplerError(ValueError):
    """Raised when a split cannot supply the requested episode shape."""


@dataclass
class Dataset:
    """Class-indexed image stacks plus a disjoint split assignment."""

    images: dict[int, np.ndarray]          # class id -> (count, c, s, s)
    splits: dict[str, tuple[int, ...]]     # split name -> class ids
    name: str = "dataset"

    def __post_init__(self):
        self.validate()

    def validate(self):
        declared = set(self.images)
        seen = set()
        for split in SPLIT_NAMES:
            ids = self.splits.get(split, ())
            overlap = seen.intersection(ids)
            if overlap:
                raise DatasetError(
                    f"class {sorted(overlap)[0]} appears in more than one split"
                )
            seen.update(ids)
        if seen != declared:
            raise DatasetError(
                f"splits cover classes {sorted(seen)} but dataset declares "
                f"{sorted(declared)}"
            )
        shapes = {arr.shape[1:] for arr in self.images.values()}
        if len(shapes) > 1:
            raise DatasetError(f"inconsistent image shapes across classes: {shapes}")

    @property
    def image_shape(self):
        first = next(iter(self.images.values()))
        return first.shape[1:]

    def split_classes(self, split):
        if split not in SPLIT_NAMES:
            raise SamplerError(f"unknown split {split!r}, expected one of {SPLIT_NAMES}")
        return self.splits.get(split, ())


@dataclass
class Episode:
    """One n-way k-shot task with l queries per class."""

    n: int
    k: int
    l: int
    support_images: np.ndarray            # (n*k, c, s, s)
    support_labels: np.ndarray            # episode-local, 0..n-1
    query_images: np.ndarray              # (n*l, c, s, s)
    query_labels: np.ndarray
    class_ids: tuple[int, ...]            # global ids, position = local label
    support_source: tuple = field(default=(), repr=False)  # (class id, sample idx)
    query_source: tuple = field(default=(), repr=False)


def sample_episode(dataset, split, n, k, l, rng):
    """Sample an episode: n classes uniformly without replacement, then per
    class k+l distinct samples with the first k going to the support set."""
    ids = dataset.split_classes(split)
    if len(ids) < n:
        raise SamplerError(
            f"split {split!r} has {len(ids)} classes, need {n} for an {n}-way episode"
        )
    need = k + l
    for cid in ids:
        have = dataset.images[cid].shape[0]
        if have < need:
            raise SamplerError(
                f"class {cid} has {have} samples, need {need} (k={k} support + "
                f"l={l} query)"
            )
    chosen = rng.choice(len(ids), size=n, replace=False)
    class_ids = tuple(ids[int(i)] for i in chosen)
    support, query, s_src, q_src = [], [], [], []
    support_labels, query_labels = [], []
    for local, cid in enumerate(class_ids):
        image_stack = dataset.images[cid]
        picks = rng.choice(image_stack.shape[0], size=need, replace=False)
        for idx in picks[:k]:
            support.append(image_stack[int(idx)])
            support_labels.append(local)
            s_src.append((cid, int(idx)))
        for idx in picks[k:]:
            query.append(image_stack[int(idx)])
            query_labels.append(local)
            q_src.append((cid, int(idx)))
    return Episode(
        n=n, k=k, l=l,
        support_images=np.stack(support),
        support_labels=np.array(support_labels, dtype=np.int64),
        query_images=np.stack(query),
        query_labels=np.array(query_labels, dtype=np.int64),
        class_ids=class_ids,
        support_source=tuple(s_src),
        query_source=tuple(q_src),
    )


# ------------------------------------------------------------------------
# Synthetic data: procedural pattern families, one per class.
# ------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    samples_per_class: int
    image_side: int
    seed: int
    channels: int = 1
    split_counts: tuple[int, int, int] | None = None  # default 50/25/25 of classes

    def resolved_split_counts(self):
        if self.split_counts is not None:
            counts = tuple(int(c) for c in self.split_counts)
            if sum(counts) != self.num_classes or any(c < 0 for c in counts):
                raise DatasetError(
                    f"split counts {counts} do not partition {self.num_classes} classes"
                )
            return counts
        n_train = round(0.5 * self.num_classes)
        n_val = round(0.25 * self.num_classes)
        return (n_train, n_val, self.num_classes - n_train - n_val)


_NUM_SHAPES = 4   # ring, box, plus, diagonal cross
_NUM_TEXTURES = 2  # solid, dotted


def _render_pattern(shape_idx, texture_idx, side, size_band, rng):
    """One image of a (shape, stroke texture) family with jittered placement."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    jitter = side / 8.0
    cy = side / 2.0 + rng.uniform(-jitter, jitter)
    cx = side / 2.0 + rng.uniform(-jitter, jitter)
    lo, hi = size_band
    radius = rng.uniform(lo, hi) * side
    stroke = max(1.0, 0.08 * side)
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if shape_idx == 0:      # ring
        mask = np.abs(np.hypot(dx, dy) - radius) < stroke
    elif shape_idx == 1:    # box outline
        mask = np.abs(np.maximum(adx, ady) - radius) < stroke
    elif shape_idx == 2:    # plus
        mask = ((adx < stroke) | (ady < stroke)) & (np.maximum(adx, ady) <= radius)
    else:                   # diagonal cross
        mask = (np.abs(adx - ady) < stroke) & (np.maximum(adx, ady) <= radius)
    img = mask * rng.uniform(0.75, 0.95)
    if texture_idx == 1:
        img = img * ((yy + xx) % 2 == 0)
    img = img + rng.normal(0.0, 0.07, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec):
    """Deterministic synthetic dataset; each class is one pattern family.

    Families cycle through shape x texture combinations; extra classes reuse
    a family at a different size band so they stay distinguishable.
    """
    if spec.image_side < 8:
        raise DatasetError(f"image side {spec.image_side} too small to render patterns")
    counts = spec.resolved_split_counts()
    rng = np.random.default_rng(spec.seed)
    images = {}
    bands = ((0.28, 0.36), (0.16, 0.22))
    for cid in range(spec.num_classes):
        family = cid % (_NUM_SHAPES * _NUM_TEXTURES)
        band = bands[(cid // (_NUM_SHAPES * _NUM_TEXTURES)) % len(bands)]
        shape_idx, texture_idx = family % _NUM_SHAPES, family // _NUM_SHAPES
        stack = np.stack([
            _render_pattern(shape_idx, texture_idx, spec.image_side, band, rng)
            for _ in range(spec.samples_per_class)
        ])
        images[cid] = np.repeat(stack[:, None, :, :], spec.channels, axis=1)
    ids = list(range(spec.num_classes))
    splits = {
        "train": tuple(ids[: counts[0]]),
        "val": tuple(ids[counts[0]: counts[0] + counts[1]]),
        "test": tuple(ids[counts[0] + counts[1]:]),
    }
    return Dataset(images=images, splits=splits, name=f"synthetic-{spec.seed}")


# ------------------------------------------------------------------------
# Manifest + blob persistence.
# ------------------------------------------------------------------------

def save_dataset(dataset, out_dir):
    """Write a dataset as a JSON manifest plus one tensor blob per class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = []
    for cid in sorted(dataset.images):
        blob = f"class_{cid:04d}.bin"
        write_tensor_blob(out_dir / blob, dataset.images[cid])
        classes.append({
            "id": cid,
            "count": int(dataset.images[cid].shape[0]),
            "file": blob,
        })
    manifest = {
        "name": dataset.name,
        "image_shape": list(dataset.image_shape),
        "classes": classes,
        "splits": {k: list(v) for k, v in dataset.splits.items()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(manifest_path):
    """Load a dataset, validating blobs, shapes and split invariants."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as err:
        raise DatasetError(f"{manifest_path}: invalid manifest: {err}")
    base = manifest_path.parent
    expected_shape = tuple(manifest["image_shape"])
    images = {}
    for entry in manifest["classes"]:
        cid = int(entry["id"])
        blob_path = base / entry["file"]
        if not blob_path.exists():
            raise DatasetError(f"class {cid}: missing blob {blob_path}")
        arr = read_tensor_blob(blob_path)
        if arr.shape[1:] != expected_shape:
            raise DatasetError(
                f"class {cid}: blob shape {arr.shape[1:]} does not match manifest "
                f"image shape {expected_shape}"
            )
        if arr.shape[0] != int(entry["count"]):
            raise DatasetError(
                f"class {cid}: blob holds {arr.shape[0]} samples, manifest "
                f"declares {entry['count']}"
            )
        images[cid] = arr
    splits = {k: tuple(int(c) for c in v) for k, v in manifest["splits"].items()}
    return Dataset(images=images, splits=splits, name=manifest.get("name", "dataset"))
