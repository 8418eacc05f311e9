"""Labeled scenes and the sparse annotation schemes drawn from them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import PointCloud


@dataclass
class LabeledScene:
    cloud: PointCloud
    gt_classes: np.ndarray
    instance_ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        n = self.cloud.n_points
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.intp)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.intp)
        if self.gt_classes.shape != (n,) or self.instance_ids.shape != (n,):
            raise ValueError("gt_classes and instance_ids need one entry per point")
        if n and (self.gt_classes.min() < 0 or self.gt_classes.max() >= self.n_classes):
            raise ValueError(f"classes must lie in [0, {self.n_classes})")
        if n and self.instance_ids.min() < 0:
            raise ValueError("instance ids must be non-negative")
        for inst in np.unique(self.instance_ids):
            if np.unique(self.gt_classes[self.instance_ids == inst]).size != 1:
                raise ValueError(f"instance {inst} mixes several classes")

    @property
    def n_points(self) -> int:
        return self.cloud.n_points

    @property
    def n_instances(self) -> int:
        return np.unique(self.instance_ids).size


@dataclass
class WeakLabels:
    """The M annotated (point index, class) pairs of one scene, sorted by index."""

    indices: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp).reshape(-1)
        self.classes = np.asarray(self.classes, dtype=np.intp).reshape(-1)
        if self.indices.shape != self.classes.shape:
            raise ValueError("indices and classes must have equal length")
        if self.indices.size == 0:
            raise ValueError("no supervision: weak labels are empty")
        if np.unique(self.indices).size != self.indices.size:
            raise ValueError("duplicate labeled point")
        order = np.argsort(self.indices, kind="stable")
        self.indices, self.classes = self.indices[order], self.classes[order]

    def __len__(self) -> int:
        return self.indices.size

    def validate(self, scene: LabeledScene) -> None:
        if self.indices.max() >= scene.n_points or self.indices.min() < 0:
            raise ValueError("labeled index out of range")
        if (scene.gt_classes[self.indices] != self.classes).any():
            raise ValueError("weak label disagrees with ground truth")

    def offset(self, shift: int) -> "WeakLabels":
        return WeakLabels(self.indices + shift, self.classes)


def _labels_at(scene: LabeledScene, idx: np.ndarray) -> WeakLabels:
    idx = np.asarray(idx, dtype=np.intp)
    return WeakLabels(idx, scene.gt_classes[idx])


def sample_otoc(scene: LabeledScene, rng: np.random.Generator) -> WeakLabels:
    """One thing, one click: a uniformly chosen point per instance."""
    picks = [rng.choice(np.flatnonzero(scene.instance_ids == inst))
             for inst in np.unique(scene.instance_ids)]
    return _labels_at(scene, picks)


def sample_ottc(scene: LabeledScene, rng: np.random.Generator, clicks: int = 3) -> WeakLabels:
    """Up to three distinct points per instance (all of them for smaller instances)."""
    picks = []
    for inst in np.unique(scene.instance_ids):
        members = np.flatnonzero(scene.instance_ids == inst)
        picks.extend(rng.choice(members, size=min(clicks, members.size), replace=False))
    return _labels_at(scene, picks)


def sample_fixed_k(scene: LabeledScene, rng: np.random.Generator, k: int = 20) -> WeakLabels:
    if scene.n_points < k:
        raise ValueError(f"cannot label {k} points in a scene of {scene.n_points}")
    return _labels_at(scene, rng.choice(scene.n_points, size=k, replace=False))


SCHEMES = {
    "otoc": sample_otoc,
    "ottc": sample_ottc,
    "points20": sample_fixed_k,
}


def sample_labels(scene: LabeledScene, scheme: str, rng: np.random.Generator) -> WeakLabels:
    try:
        sampler = SCHEMES[scheme]
    except KeyError:
        raise ValueError(f"unknown annotation scheme {scheme!r}; choose from {sorted(SCHEMES)}") from None
    return sampler(scene, rng)
