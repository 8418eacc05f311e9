"""A small point segmentation network, differentiable in coordinates, features and weights.

Per point: ``h = MLP_enc([c; f])``, ``g = max over knn(c) of h``,
``logits = MLP_head([h; g])``. Neighbor indices are recomputed from whatever
coordinates are fed in but are treated as a discrete, non-differentiable
structure; gradients reach the coordinates through the encoder input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Graph, Node, softmax

PARAM_NAMES = ("enc1_w", "enc1_b", "enc2_w", "enc2_b",
               "head1_w", "head1_b", "head2_w", "head2_b")


@dataclass
class PointCloud:
    """Coordinates (N x 3, meters) and features (N x D_f).

    ``batch`` optionally tags each point with a scene index so that several
    scenes can be stacked into one cloud without their neighborhoods mixing.
    """

    coords: np.ndarray
    feats: np.ndarray
    batch: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got {self.coords.shape}")
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ValueError(f"feats must have {self.coords.shape[0]} rows, got {self.feats.shape}")
        if self.coords.shape[0] < 1:
            raise ValueError("empty point cloud")
        if not (np.isfinite(self.coords).all() and np.isfinite(self.feats).all()):
            raise ValueError("point cloud contains NaN or Inf")
        if self.batch is not None:
            self.batch = np.asarray(self.batch, dtype=np.intp)
            if self.batch.shape != (self.coords.shape[0],):
                raise ValueError("batch must hold one scene index per point")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]

    def replace(self, coords=None, feats=None) -> "PointCloud":
        return PointCloud(self.coords if coords is None else coords,
                          self.feats if feats is None else feats, self.batch)


@dataclass
class ModelParams:
    """Named weight arrays, in a fixed order."""

    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        missing = [k for k in PARAM_NAMES if k not in self.arrays]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        self.arrays = {k: np.asarray(self.arrays[k], dtype=np.float64) for k in PARAM_NAMES}
        a = self.arrays
        d_in, h1 = a["enc1_w"].shape
        chain = [("enc1_b", (1, h1)), ("enc2_w", (h1, h1)), ("enc2_b", (1, h1)),
                 ("head1_w", (2 * h1, a["head1_w"].shape[1]))]
        h2 = a["head1_w"].shape[1]
        chain += [("head1_b", (1, h2)), ("head2_w", (h2, a["head2_w"].shape[1]))]
        chain += [("head2_b", (1, a["head2_w"].shape[1]))]
        for name, shape in chain:
            if a[name].shape != shape:
                raise ValueError(f"{name} has shape {a[name].shape}, expected {shape}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if d_in < 4:
            raise ValueError("encoder input must hold 3 coordinates plus features")

    @property
    def n_classes(self) -> int:
        return self.arrays["head2_w"].shape[1]

    @property
    def feat_dim(self) -> int:
        return self.arrays["enc1_w"].shape[0] - 3

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    @classmethod
    def zeros(cls, feat_dim: int, n_classes: int, hidden1: int = 32, hidden2: int = 32):
        shapes = _param_shapes(feat_dim, n_classes, hidden1, hidden2)
        return cls({k: np.zeros(s) for k, s in shapes.items()})


def _param_shapes(feat_dim, n_classes, hidden1, hidden2):
    return {
        "enc1_w": (3 + feat_dim, hidden1), "enc1_b": (1, hidden1),
        "enc2_w": (hidden1, hidden1), "enc2_b": (1, hidden1),
        "head1_w": (2 * hidden1, hidden2), "head1_b": (1, hidden2),
        "head2_w": (hidden2, n_classes), "head2_b": (1, n_classes),
    }


def init_params(feat_dim: int, n_classes: int, rng: np.random.Generator,
                hidden1: int = 32, hidden2: int = 32) -> ModelParams:
    """He-normal weights, zero biases."""
    arrays = {}
    for name, shape in _param_shapes(feat_dim, n_classes, hidden1, hidden2).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    return ModelParams(arrays)


def knn_index(coords: np.ndarray, k: int, batch: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k nearest points to each point, itself first.

    Ties are broken by lower point index. With ``batch`` given, neighbors
    are only searched within the same scene.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if batch is None:
        if k > n:
            raise ValueError(f"k={k} exceeds the number of points {n}")
        return _knn_single(coords, k)
    batch = np.asarray(batch)
    out = np.empty((n, k), dtype=np.intp)
    for b in np.unique(batch):
        rows = np.flatnonzero(batch == b)
        if k > rows.size:
            raise ValueError(f"k={k} exceeds the {rows.size} points of scene {b}")
        out[rows] = rows[_knn_single(coords[rows], k)]
    return out


def _knn_single(coords, k):
    n = coords.shape[0]
    m = min(k + 1, n)
    dist, idx = cKDTree(coords).query(coords, k=m)
    dist = np.asarray(dist).reshape(n, m)
    idx = np.asarray(idx).reshape(n, m)
    out = idx[:, :k].copy()
    # the tree orders by distance only; any tie (or a duplicate point displacing
    # the point itself from the front) is settled by brute force
    suspect = (idx[:, 0] != np.arange(n)) | (np.diff(dist, axis=1) == 0).any(axis=1)
    for i in np.flatnonzero(suspect):
        out[i] = _knn_brute_row(coords, i, k)
    return out


def _knn_brute_row(coords, i, k):
    d = np.sqrt(((coords - coords[i]) ** 2).sum(axis=1))
    idx = np.arange(coords.shape[0])
    return np.lexsort((idx, idx != i, d))[:k]


@dataclass
class ForwardPass:
    """The logits node and the leaves it was built from."""

    logits: Node
    coords: Node
    feats: Node
    params: dict[str, Node]


def register_params(graph: Graph, params: ModelParams, trainable: bool = True) -> dict[str, Node]:
    make = graph.leaf if trainable else graph.constant
    return {name: make(value) for name, value in params.items()}


def network(graph: Graph, coords: Node, feats: Node, params: Mapping[str, Node],
            neighbors: np.ndarray) -> Node:
    """Build the network on existing nodes and return the logits node."""
    x = graph.concat_columns(coords, feats)
    h = graph.relu(graph.add(graph.matmul(x, params["enc1_w"]), params["enc1_b"]))
    h = graph.relu(graph.add(graph.matmul(h, params["enc2_w"]), params["enc2_b"]))
    pooled = graph.row_max_over_groups(h, neighbors)
    z = graph.concat_columns(h, pooled)
    z = graph.relu(graph.add(graph.matmul(z, params["head1_w"]), params["head1_b"]))
    return graph.add(graph.matmul(z, params["head2_w"]), params["head2_b"])


def forward(cloud: PointCloud, params: ModelParams, graph: Graph | None = None,
            k: int = 8, param_nodes: Mapping[str, Node] | None = None) -> ForwardPass:
    """Run the network with coordinates, features and (unless given) weights as leaves."""
    graph = Graph() if graph is None else graph
    if cloud.feat_dim != params.feat_dim:
        raise ValueError(f"cloud has {cloud.feat_dim} feature channels, model expects {params.feat_dim}")
    coords = graph.leaf(cloud.coords)
    feats = graph.leaf(cloud.feats)
    nodes = dict(param_nodes) if param_nodes is not None else register_params(graph, params)
    neighbors = knn_index(cloud.coords, k, cloud.batch)
    return ForwardPass(network(graph, coords, feats, nodes, neighbors), coords, feats, nodes)


def logits(cloud: PointCloud, params: ModelParams, k: int = 8) -> np.ndarray:
    """Forward pass without recording anything differentiable."""
    graph = Graph()
    nodes = register_params(graph, params, trainable=False)
    out = network(graph, graph.constant(cloud.coords), graph.constant(cloud.feats), nodes,
                  knn_index(cloud.coords, k, cloud.batch))
    return np.array(out.value)


def predict_probabilities(logit_values: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(logit_values, dtype=np.float64))


def predict_labels(logit_values: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return np.asarray(logit_values).argmax(axis=1)
