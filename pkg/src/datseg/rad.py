"""Regional adaptive deformation: adversarial affine moves of whole superpoints.

Each region carries a translation, a per-axis log-scale and an axis-angle
rotation, all zero at the identity. A point ``p`` of region ``i`` with
centroid ``c`` maps to ``R(w) diag(exp(s)) (p - c) + c + t``: scale first,
then rotate, then translate, all about the centroid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, softmax
from .backbone import ModelParams, PointCloud, knn_index, logits, network, register_params
from .lap import normalize_rows

TRANSFORMS = ("translation", "scale", "rotation")
MIN_REGION = 5


@dataclass
class RadConfig:
    xi_A: float = 0.1
    eps_A: float = 0.05
    transforms: tuple[str, ...] = TRANSFORMS
    cell_size: float = 0.5

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        if self.xi_A < 0 or self.eps_A < 0:
            raise ValueError("deformation magnitudes must be non-negative")
        if not self.transforms:
            raise ValueError("enable at least one transform")
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")


@dataclass
class SuperpointPartition:
    region_of: np.ndarray
    n_regions: int
    centroids: np.ndarray

    def sizes(self) -> np.ndarray:
        return np.bincount(self.region_of, minlength=self.n_regions)


@dataclass
class AffineParams:
    translation: np.ndarray
    log_scale: np.ndarray
    axis_angle: np.ndarray

    @classmethod
    def identity(cls, n_regions: int) -> "AffineParams":
        return cls(np.zeros((n_regions, 3)), np.zeros((n_regions, 3)), np.zeros((n_regions, 3)))

    def by_type(self) -> dict[str, np.ndarray]:
        return {"translation": self.translation, "scale": self.log_scale, "rotation": self.axis_angle}

    @classmethod
    def from_types(cls, arrays: dict[str, np.ndarray]) -> "AffineParams":
        return cls(arrays["translation"], arrays["scale"], arrays["rotation"])


def partition_superpoints(cloud: PointCloud, cell_size: float = 0.5) -> SuperpointPartition:
    """Voxel-grid oversegmentation, per scene when the cloud is batched.

    Cells with fewer than five points join the region whose centroid is
    closest to theirs. Region ids are contiguous.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    coords = cloud.coords
    batch = np.zeros(cloud.n_points, dtype=np.intp) if cloud.batch is None else cloud.batch
    region_of = np.empty(cloud.n_points, dtype=np.intp)
    next_id = 0
    for b in np.unique(batch):
        rows = np.flatnonzero(batch == b)
        local = _voxel_regions(coords[rows], cell_size)
        region_of[rows] = local + next_id
        next_id += local.max() + 1
    return SuperpointPartition(region_of, next_id, region_centroids(coords, region_of, next_id))


def _voxel_regions(coords, cell_size):
    keys = np.floor(coords / cell_size).astype(np.int64)
    _, cell = np.unique(keys, axis=0, return_inverse=True)
    cell = cell.reshape(-1)
    n_cells = cell.max() + 1
    sizes = np.bincount(cell, minlength=n_cells)
    centroids = region_centroids(coords, cell, n_cells)
    big = np.flatnonzero(sizes >= MIN_REGION)
    if big.size == 0:
        return np.zeros(coords.shape[0], dtype=np.intp)
    target = np.arange(n_cells)
    for c in np.flatnonzero(sizes < MIN_REGION):
        d = ((centroids[big] - centroids[c]) ** 2).sum(axis=1)
        target[c] = big[np.argmin(d)]
    relabel = np.full(n_cells, -1)
    relabel[big] = np.arange(big.size)
    return relabel[target[cell]].astype(np.intp)


def region_centroids(coords, region_of, n_regions):
    sizes = np.bincount(region_of, minlength=n_regions)
    sums = np.stack([np.bincount(region_of, weights=coords[:, j], minlength=n_regions)
                     for j in range(3)], axis=1)
    return sums / sizes[:, None]


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, (..., 3) -> (..., 3, 3)."""
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([np.stack([z, -w, y], -1),
                     np.stack([w, z, -x], -1),
                     np.stack([-y, x, z], -1)], -2)


_SMALL_ANGLE = 1e-2


def _rodrigues_coefficients(theta):
    """a = sin t / t, b = (1 - cos t) / t^2 and their derivatives divided by t."""
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta ** 2
    a = np.where(small, 1 - t2 / 6 + t2 ** 2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 ** 2 / 720, (1 - np.cos(t)) / t ** 2)
    da = np.where(small, -1 / 3 + t2 / 30 - t2 ** 2 / 840,
                  (t * np.cos(t) - np.sin(t)) / t ** 3)
    db = np.where(small, -1 / 12 + t2 / 180 - t2 ** 2 / 6720,
                  (t * np.sin(t) - 2 * (1 - np.cos(t))) / t ** 4)
    return a, b, da, db


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrices for a batch of axis-angle vectors, (..., 3) -> (..., 3, 3)."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _, _ = _rodrigues_coefficients(theta)
    k = _skew(w)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_jacobian(axis_angle: np.ndarray) -> np.ndarray:
    """dR/dw_j stacked on a new axis: (..., 3) -> (..., 3[j], 3, 3)."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, da, db = _rodrigues_coefficients(theta)
    k = _skew(w)
    k2 = k @ k
    basis = _skew(np.eye(3))  # [e_j]_x
    out = []
    for j in range(3):
        e = basis[j]
        wj = w[..., j][..., None, None]
        term = (a[..., None, None] * e + b[..., None, None] * (e @ k + k @ e)
                + da[..., None, None] * wj * k + db[..., None, None] * wj * k2)
        out.append(term)
    return np.stack(out, axis=-3)


def apply_affine_values(coords: np.ndarray, partition: SuperpointPartition,
                        params: AffineParams) -> np.ndarray:
    """Deformed coordinates (plain arrays, no graph)."""
    return _affine_forward(coords, partition, params.translation, params.log_scale,
                           params.axis_angle)[0]


def _affine_forward(coords, partition, t, s, w):
    r = partition.region_of
    q = coords - partition.centroids[r]
    u = np.exp(s)[r] * q
    rot = rodrigues(w)
    moved = np.einsum("nab,nb->na", rot[r], u)
    # written as a displacement so identity parameters reproduce coords exactly
    return coords + (moved - q) + t[r], q, u, rot


def apply_affine(graph: Graph, coords: Node, t: Node, s: Node, w: Node,
                 partition: SuperpointPartition) -> Node:
    """Graph primitive for the region-wise affine map; differentiable in all four inputs."""
    out, q, u, rot = _affine_forward(coords.value, partition, t.value, s.value, w.value)
    r = partition.region_of
    n_reg = partition.n_regions
    scale = np.exp(s.value)

    def per_region(values):
        return np.stack([np.bincount(r, weights=values[:, j], minlength=n_reg)
                         for j in range(values.shape[1])], axis=1)

    def vjp(g):
        rt_g = np.einsum("nba,nb->na", rot[r], g)          # R^T g per point
        g_t = per_region(g)
        g_s = per_region(rt_g * u)
        outer = per_region(np.einsum("na,nb->nab", g, u).reshape(-1, 9)).reshape(n_reg, 3, 3)
        g_w = np.einsum("kjab,kab->kj", rodrigues_jacobian(w.value), outer)
        g_c = scale[r] * rt_g
        return g_c, g_t, g_s, g_w

    return graph.custom("apply_affine", (coords, t, s, w), out, vjp)


def random_affine_params(n_regions: int, rng: np.random.Generator, magnitude: float,
                         transforms=TRANSFORMS) -> AffineParams:
    """Each enabled (region, type) vector is an isotropic direction of norm ``magnitude``."""
    arrays = {}
    for name in TRANSFORMS:
        d = normalize_rows(rng.standard_normal((n_regions, 3)))[0]
        arrays[name] = magnitude * d if name in transforms else np.zeros((n_regions, 3))
    return AffineParams.from_types(arrays)


@dataclass
class RadDiagnostics:
    lds: float
    grad_norms: dict[str, float]
    zero_pairs: int


def regional_divergence_gradient(cloud: PointCloud, partition: SuperpointPartition,
                                 params: ModelParams, clean_probs: np.ndarray,
                                 affine: AffineParams, k: int = 8):
    """KL(clean || prediction on deformed cloud) and its gradients by transform type."""
    graph = Graph()
    nodes = register_params(graph, params, trainable=False)
    leaves = {name: graph.leaf(v) for name, v in affine.by_type().items()}
    coords = apply_affine(graph, graph.constant(cloud.coords), leaves["translation"],
                          leaves["scale"], leaves["rotation"], partition)
    out = network(graph, coords, graph.constant(cloud.feats), nodes,
                  knn_index(coords.value, k, cloud.batch))
    lds = graph.kl_divergence_rows(graph.constant(clean_probs), graph.log_softmax_rows(out))
    grads = graph.backward(lds)
    return lds.item(), {name: grads[leaf.id] for name, leaf in leaves.items()}


def generate_rad(cloud: PointCloud, partition: SuperpointPartition, params: ModelParams,
                 config: RadConfig, rng: np.random.Generator, *,
                 clean_logits: np.ndarray | None = None, ip: int = 1,
                 k: int = 8) -> tuple[PointCloud, AffineParams, RadDiagnostics]:
    """Deform every superpoint along the per-region direction that most changes the prediction.

    Returns the deformed cloud, the adversarial parameters (each enabled
    (region, type) vector of norm ``eps_A`` unless its gradient vanished)
    and diagnostics.
    """
    if clean_logits is None:
        clean_logits = logits(cloud, params, k)
    probs = softmax(clean_logits)
    direction = random_affine_params(partition.n_regions, rng, 1.0, config.transforms).by_type()
    zero_pairs = 0
    for _ in range(ip):
        init = AffineParams.from_types({n: config.xi_A * d for n, d in direction.items()})
        lds, grads = regional_divergence_gradient(cloud, partition, params, probs, init, k)
        zero_pairs = 0
        for name in TRANSFORMS:
            if name in config.transforms:
                direction[name], zero = normalize_rows(grads[name])
                zero_pairs += int(zero.sum())
            else:
                direction[name] = np.zeros((partition.n_regions, 3))
    adv = AffineParams.from_types({n: config.eps_A * d for n, d in direction.items()})
    coords = (cloud.coords.copy() if config.eps_A == 0
              else apply_affine_values(cloud.coords, partition, adv))
    norms = {name: float(np.linalg.norm(grads[name], axis=1).mean()) for name in config.transforms}
    return cloud.replace(coords=coords), adv, RadDiagnostics(lds, norms, zero_pairs)
