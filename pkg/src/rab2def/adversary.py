"""Poisoning behaviours: label flipping, random weights, pattern-key backdoors.

Backdoor clients also boost their update so that, under plain averaging, it
overwrites the global model (``beta = n / server_lr``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ShapeError
from .model import ModelLayout

PATTERN_KINDS = ("cross", "square")


@dataclass(frozen=True)
class BackdoorPattern:
    """A trigger stamped into images.

    ``position`` is the centre pixel for a cross and the top-left pixel for a
    square.  For a cross, ``size`` is the span of each arm-pair through the
    centre (3 -> centre plus one pixel on each side).
    """

    kind: str
    size: int
    position: tuple[int, int]
    intensity: float
    target_label: int

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("pattern size must be >= 1")
        if self.kind == "cross" and self.size % 2 == 0:
            raise ValueError("a cross needs an odd span so it has a centre pixel")
        if not np.isfinite(self.intensity) or not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")
        object.__setattr__(self, "position", (int(self.position[0]), int(self.position[1])))

    @classmethod
    def bottom_right(cls, kind: str, size: int, image_shape, intensity: float, target_label: int):
        """Anchor the pattern in the bottom-right corner.

        A cross of span 3 is centred one pixel in from the corner so its arms
        touch the last row and column; a square sits flush in the corner.
        """
        h, w = image_shape[0], image_shape[1]
        if kind == "cross":
            arm = size // 2
            pos = (h - 1 - arm, w - 1 - arm)
        else:
            pos = (h - size, w - size)
        return cls(kind, size, pos, intensity, target_label)

    def pixels(self) -> list[tuple[int, int]]:
        r, c = self.position
        if self.kind == "square":
            return [(r + i, c + j) for i in range(self.size) for j in range(self.size)]
        arm = self.size // 2
        cells = {(r, c)}
        for d in range(1, arm + 1):
            cells.update({(r - d, c), (r + d, c), (r, c - d), (r, c + d)})
        return sorted(cells)

    def fits(self, image_shape) -> bool:
        h, w = image_shape[0], image_shape[1]
        return all(0 <= r < h and 0 <= c < w for r, c in self.pixels())

    def footprint(self, image_shape) -> np.ndarray:
        """Flat feature indices covered by the pattern (all channels)."""
        if not self.fits(image_shape):
            raise ShapeError(f"{self.kind} pattern at {self.position} does not fit {tuple(image_shape)}")
        h, w, ch = image_shape
        return np.array(
            sorted((r * w + c) * ch + k for r, c in self.pixels() for k in range(ch)),
            dtype=np.int64,
        )

    def stamp(self, features: np.ndarray, image_shape) -> np.ndarray:
        out = np.array(features, dtype=np.float64, copy=True)
        out[..., self.footprint(image_shape)] = self.intensity
        return out


def flip_labels(data: Dataset, seed: int) -> Dataset:
    """Replace every label with a uniformly drawn *different* label."""
    if data.classes < 2:
        raise ValueError("cannot flip labels of a single-class dataset")
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, data.classes, size=len(data))
    return data.with_labels((data.labels + shift) % data.classes)


def random_weights_update(layout: ModelLayout, scale: float, seed: int) -> np.ndarray:
    if not scale > 0:
        raise ValueError("scale must be positive")
    return np.random.default_rng(seed).uniform(-scale, scale, size=layout.n_params)


def inject_backdoor(data: Dataset, pattern: BackdoorPattern, fraction: float, seed: int = 0) -> Dataset:
    """Stamp ``pattern`` into a seeded ``fraction`` of samples and relabel them.

    The chosen rows depend only on ``seed`` and the dataset size, so a second
    application with the same seed touches the same rows and changes nothing.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if not 0 <= pattern.target_label < data.classes:
        raise ValueError("target label outside the class range")
    cols = pattern.footprint(data.image_shape)
    n_poison = int(round(fraction * len(data)))
    rows = np.sort(np.random.default_rng(seed).permutation(len(data))[:n_poison])
    X = data.features.copy()
    y = data.labels.copy()
    X[np.ix_(rows, cols)] = pattern.intensity
    y[rows] = pattern.target_label
    return Dataset(X, y, data.classes, data.image_shape)


def backdoor_test_set(data: Dataset, pattern: BackdoorPattern) -> Dataset:
    """Every sample not already of the target class, stamped and relabelled."""
    keep = np.flatnonzero(data.labels != pattern.target_label)
    X = pattern.stamp(data.features[keep], data.image_shape)
    y = np.full(keep.size, pattern.target_label, dtype=np.int64)
    return Dataset(X, y, data.classes, data.image_shape)


def boost_update(adv_params: np.ndarray, global_prev: np.ndarray, n_clients: int, server_lr: float) -> np.ndarray:
    """``(n / server_lr) * (adv_params - global_prev)``: the delta an attacker submits."""
    adv_params = np.asarray(adv_params, dtype=np.float64)
    global_prev = np.asarray(global_prev, dtype=np.float64)
    if adv_params.shape != global_prev.shape:
        raise ShapeError(f"layout mismatch: {adv_params.shape} vs {global_prev.shape}")
    if n_clients < 1 or not server_lr > 0:
        raise ValueError("need n_clients >= 1 and a positive server learning rate")
    beta = n_clients / server_lr
    return beta * (adv_params - global_prev)
