"""Quarter-turn rotations for images and feature maps.

All rotations are exact index permutations (counterclockwise, no
interpolation), so rotating an image and rotating a feature map use the
same permutation table and stay aligned. The identity is deliberately not
a member of any transform set; a no-op transform would make the
consistency objective vacuous.
"""

from __future__ import annotations

from dataclasses import dataclass

from espt.tensor import as_tensor, rot90

_DEGREES_TO_TURNS = {90: 1, 180: 2, 270: 3}
_TURNS_TO_DEGREES = {1: 90, 2: 180, 3: 270}


@dataclass(frozen=True)
class TransformSet:
    """A nonempty set of quarter-turn counts drawn from {1, 2, 3}."""

    turns: tuple[int, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError("transform set must be nonempty")
        if len(set(self.turns)) != len(self.turns):
            raise ValueError(f"transform set has duplicates: {self.turns}")
        bad = [t for t in self.turns if t not in (1, 2, 3)]
        if bad:
            raise ValueError(
                f"transform turns must be in {{1, 2, 3}} (identity excluded), got {bad}"
            )

    @classmethod
    def from_degrees(cls, degrees):
        try:
            turns = tuple(_DEGREES_TO_TURNS[int(d)] for d in degrees)
        except KeyError as err:
            raise ValueError(f"rotation degrees must be in {{90, 180, 270}}, got {err}")
        return cls(turns)

    @property
    def degrees(self):
        return tuple(_TURNS_TO_DEGREES[t] for t in self.turns)


def sample_transform(transform_set, rng):
    """Draw one member uniformly; an episode shares a single draw."""
    members = transform_set.turns
    return members[int(rng.integers(len(members)))]


def rotate_image(image, turns):
    """Rotate (..., height, width) image tensors counterclockwise by quarter turns."""
    image = as_tensor(image)
    if image.ndim < 2:
        raise ValueError(f"image must have spatial dims, got shape {image.shape}")
    return rot90(image, turns, axes=(image.ndim - 2, image.ndim - 1))


def rotate_feature_map(fmap, turns):
    """Rotate an (h, w, d) or (batch, h, w, d) feature map; channels move intact.

    Differentiable: the backward pass applies the inverse permutation.
    """
    fmap = as_tensor(fmap)
    if fmap.ndim == 3:
        return rot90(fmap, turns, axes=(0, 1))
    if fmap.ndim == 4:
        return rot90(fmap, turns, axes=(1, 2))
    raise ValueError(f"feature map must be 3-d or 4-d, got shape {fmap.shape}")
