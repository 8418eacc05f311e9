"""Synthetic rooms with dense semantic and instance labels.

A room is a floor, four walls (one instance) and a handful of primitive
objects resting on the floor. The room is centred on the origin in x and y
with the floor at z = 0. Each point gets an rgb colour from its
class model plus a normalised height channel. The class colour models have
deliberately different covariance structure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotation import LabeledScene
from .backbone import PointCloud

CLASS_NAMES = ("floor", "wall", "box", "sphere", "cylinder", "clutter")
FEAT_DIM = 4


def _cov(stds, corr=None):
    stds = np.asarray(stds, dtype=np.float64)
    corr = np.eye(3) if corr is None else np.asarray(corr, dtype=np.float64)
    return corr * np.outer(stds, stds)


# mean rgb and covariance per class
DEFAULT_COLORS = {
    "floor": ((0.50, 0.42, 0.34), _cov((0.08, 0.08, 0.08), [[1, .9, .9], [.9, 1, .9], [.9, .9, 1]])),
    "wall": ((0.78, 0.76, 0.72), _cov((0.04, 0.04, 0.04))),
    "box": ((0.62, 0.38, 0.32), _cov((0.14, 0.04, 0.04))),
    "sphere": ((0.40, 0.55, 0.45), _cov((0.04, 0.10, 0.10), [[1, 0, 0], [0, 1, -.8], [0, -.8, 1]])),
    "cylinder": ((0.40, 0.45, 0.60), _cov((0.05, 0.05, 0.12), [[1, .5, 0], [.5, 1, 0], [0, 0, 1]])),
    "clutter": ((0.52, 0.50, 0.48), _cov((0.16, 0.16, 0.16))),
}


@dataclass
class SceneSpec:
    n_points: int = 2048
    k_classes: int = 6
    extent: tuple[float, float, float] = (6.0, 6.0, 3.0)
    instances_per_class: tuple[int, int] = (1, 3)
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    instance_color_std: float = 0.04
    noise_sigma: float = 0.01
    max_retries: int = 200

    def __post_init__(self):
        self.extent = tuple(float(e) for e in self.extent)
        self.instances_per_class = tuple(int(v) for v in self.instances_per_class)
        if self.n_points < 64:
            raise ValueError("n_points must be at least 64")
        if not 2 <= self.k_classes <= len(CLASS_NAMES):
            raise ValueError(f"k_classes must be between 2 and {len(CLASS_NAMES)}")
        if min(self.extent) <= 0:
            raise ValueError("room extents must be positive")
        lo, hi = self.instances_per_class
        if lo < 0 or hi < lo:
            raise ValueError("bad instances_per_class range")
        for name in CLASS_NAMES[:self.k_classes]:
            mean = np.asarray(self.colors[name][0])
            if mean.min() < 0 or mean.max() > 1:
                raise ValueError(f"colour mean of {name} outside [0, 1]")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[:self.k_classes]


# -- surface samplers: (rng, n, shape params) -> n x 3 points, object frame ------

def _box_surface(rng, n, size):
    sx, sy, sz = size
    faces = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])  # top, +-y, +-x
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    x, y, z = (u - 0.5) * sx, (v - 0.5) * sy, np.full(n, sz)
    pts[:] = np.stack([x, y, z], 1)
    side_y = (face == 1) | (face == 2)
    pts[side_y, 1] = np.where(face[side_y] == 1, sy / 2, -sy / 2)
    pts[side_y, 2] = v[side_y] * sz
    side_x = (face == 3) | (face == 4)
    pts[side_x, 0] = np.where(face[side_x] == 3, sx / 2, -sx / 2)
    pts[side_x, 1] = (u[side_x] - 0.5) * sy
    pts[side_x, 2] = v[side_x] * sz
    return pts


def _sphere_surface(rng, n, radius):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius + np.array([0.0, 0.0, radius])


def _cylinder_surface(rng, n, radius, height):
    side, top = 2 * np.pi * radius * height, np.pi * radius ** 2
    on_top = rng.random(n) < top / (side + top)
    ang = rng.random(n) * 2 * np.pi
    rad = np.where(on_top, radius * np.sqrt(rng.random(n)), radius)
    z = np.where(on_top, height, rng.random(n) * height)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang), z], 1)


def _clutter_surface(rng, n, radii):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.asarray(radii) + np.array([0.0, 0.0, radii[2]])


def _object(rng, cls):
    """Shape sampler, footprint radius and a rough surface area for one object."""
    if cls == "box":
        size = rng.uniform([0.4, 0.4, 0.3], [1.2, 1.2, 1.0])
        area = size[0] * size[1] + 2 * size[2] * (size[0] + size[1])
        return (lambda n: _box_surface(rng, n, size)), 0.5 * np.hypot(size[0], size[1]), area
    if cls == "sphere":
        r = rng.uniform(0.2, 0.5)
        return (lambda n: _sphere_surface(rng, n, r)), r, 4 * np.pi * r ** 2
    if cls == "cylinder":
        r, h = rng.uniform(0.15, 0.4), rng.uniform(0.5, 1.5)
        return (lambda n: _cylinder_surface(rng, n, r, h)), r, 2 * np.pi * r * h + np.pi * r ** 2
    radii = rng.uniform(0.08, 0.3, size=3)
    return (lambda n: _clutter_surface(rng, n, radii)), max(radii[:2]), 4 * np.pi * np.mean(radii) ** 2


def _allocate(weights, total, floor_each):
    """Integer split of ``total`` proportional to ``weights`` with a per-entry minimum."""
    weights = np.asarray(weights, dtype=np.float64)
    m = weights.size
    floor_each = min(floor_each, total // m)
    rest = total - floor_each * m
    share = weights / weights.sum() * rest
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:rest - counts.sum()]] += 1
    return counts + floor_each


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> LabeledScene:
    sx, sy, sz = spec.extent
    names = spec.class_names

    objects = []  # (class index, sampler, footprint center, area, yaw)
    placed = []
    lo, hi = spec.instances_per_class
    for cls in range(2, spec.k_classes):
        for _ in range(rng.integers(lo, hi + 1)):
            sampler, radius, area = _object(rng, names[cls])
            low, high = np.array([radius + 0.1] * 2), np.array([sx, sy]) - radius - 0.1
            for _ in range(spec.max_retries if (high >= low).all() else 0):
                center = rng.uniform(low, high)
                if all(np.hypot(*(center - c)) > radius + r + 0.05 for c, r in placed):
                    break
            else:
                raise RuntimeError(f"could not place a {names[cls]} after {spec.max_retries} tries")
            placed.append((center, radius))
            objects.append((cls, sampler, center, area, rng.uniform(0, 2 * np.pi)))

    # floor and walls take a fixed share so objects are not drowned out
    weights = [1.0, 1.0]
    if objects:
        areas = np.array([o[3] for o in objects])
        w = np.sqrt(areas / areas.mean())
        weights += list(min(2.0, 0.5 * len(objects)) * w / w.sum())
    counts = _allocate(weights, spec.n_points, 8)

    coords, classes, instances = [], [], []
    n_floor, n_wall = counts[0], counts[1]
    coords.append(np.stack([rng.random(n_floor) * sx, rng.random(n_floor) * sy, np.zeros(n_floor)], 1))
    perim = 2 * (sx + sy)
    s = rng.random(n_wall) * perim
    wx = np.select([s < sx, s < sx + sy, s < 2 * sx + sy], [s, sx, 2 * sx + sy - s], 0.0)
    wy = np.select([s < sx, s < sx + sy, s < 2 * sx + sy], [0.0, s - sx, sy], perim - s)
    coords.append(np.stack([wx, wy, rng.random(n_wall) * sz], 1))
    classes += [np.zeros(n_floor, int), np.ones(n_wall, int)]
    instances += [np.zeros(n_floor, int), np.ones(n_wall, int)]
    for i, (cls, sampler, center, _, yaw) in enumerate(objects):
        n = counts[2 + i]
        local = sampler(n)
        c, s_ = np.cos(yaw), np.sin(yaw)
        xy = local[:, :2] @ np.array([[c, s_], [-s_, c]])
        coords.append(np.column_stack([xy + center, local[:, 2]]))
        classes.append(np.full(n, cls))
        instances.append(np.full(n, 2 + i))

    coords = np.concatenate(coords) + rng.normal(0.0, spec.noise_sigma, size=(spec.n_points, 3))
    coords[:, :2] -= (sx / 2, sy / 2)
    classes = np.concatenate(classes)
    instances = np.concatenate(instances)

    rgb = np.empty((spec.n_points, 3))
    for inst in np.unique(instances):
        rows = instances == inst
        mean, cov = spec.colors[names[classes[rows][0]]]
        shift = rng.normal(0.0, spec.instance_color_std, size=3)
        rgb[rows] = rng.multivariate_normal(np.asarray(mean) + shift, cov, size=rows.sum(),
                                            method="cholesky")
    rgb = np.clip(rgb, 0.0, 1.0)
    height = np.clip(coords[:, 2], 0.0, sz) / sz
    feats = np.column_stack([rgb, height])
    return LabeledScene(PointCloud(coords, feats), classes, instances, spec.k_classes)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int) -> list[LabeledScene]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    return [generate_scene(spec, scene_rng(seed, i)) for i in range(n_scenes)]
