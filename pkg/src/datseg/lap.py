"""Local adaptive perturbation of coordinates and features.

Starting directions for the coordinates are iid Gaussian. Feature
directions come from a zero-mean Gaussian whose covariance is estimated
online for each pseudo-class (the class-aware generator). One or more
power-iteration rounds turn them into the directions that most increase the
KL divergence between the clean and the perturbed prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, softmax
from .backbone import ModelParams, PointCloud, knn_index, logits, network, predict_labels, register_params


@dataclass
class LapConfig:
    xi_c: float = 10.0
    xi_f: float = 0.1
    eps_c: float = 1.0
    eps_f: float = 0.05
    ip: int = 1

    def __post_init__(self):
        if min(self.xi_c, self.xi_f, self.eps_c, self.eps_f) < 0:
            raise ValueError("perturbation magnitudes must be non-negative")
        if self.ip < 1:
            raise ValueError("ip must be at least 1")


class CovarianceError(np.linalg.LinAlgError):
    pass


class ClassCovarianceTracker:
    """Running count, mean and scatter matrix of input features for each class.

    Batches are merged with the pairwise (Chan et al.) update, so the result
    does not depend on how the data was split into batches.
    """

    def __init__(self, n_classes: int, feat_dim: int):
        self.n_classes = n_classes
        self.feat_dim = feat_dim
        self.count = np.zeros(n_classes, dtype=np.int64)
        self.mean = np.zeros((n_classes, feat_dim))
        self.m2 = np.zeros((n_classes, feat_dim, feat_dim))

    def update(self, feats: np.ndarray, labels: np.ndarray) -> "ClassCovarianceTracker":
        feats = np.asarray(feats, dtype=np.float64)
        labels = np.asarray(labels)
        for k in np.unique(labels):
            x = feats[labels == k]
            n_b = x.shape[0]
            mean_b = x.mean(axis=0)
            dev = x - mean_b
            m2_b = dev.T @ dev
            n_a = self.count[k]
            n = n_a + n_b
            delta = mean_b - self.mean[k]
            self.mean[k] = self.mean[k] + delta * (n_b / n)
            self.m2[k] = self.m2[k] + m2_b + np.outer(delta, delta) * (n_a * n_b / n)
            self.count[k] = n
        return self

    def merge(self, other: "ClassCovarianceTracker") -> "ClassCovarianceTracker":
        for k in range(self.n_classes):
            n_b = other.count[k]
            if n_b == 0:
                continue
            n_a = self.count[k]
            n = n_a + n_b
            delta = other.mean[k] - self.mean[k]
            self.mean[k] = self.mean[k] + delta * (n_b / n)
            self.m2[k] = self.m2[k] + other.m2[k] + np.outer(delta, delta) * (n_a * n_b / n)
            self.count[k] = n
        return self

    def covariance(self, k: int) -> np.ndarray:
        """Unbiased covariance of class k; the identity until it has two samples."""
        n = self.count[k]
        if n < 2:
            return np.eye(self.feat_dim)
        cov = self.m2[k] / (n - 1)
        return 0.5 * (cov + cov.T)

    def factor(self, k: int, max_doublings: int = 8) -> np.ndarray:
        """Lower Cholesky factor of the jittered covariance of class k."""
        cov = self.covariance(k)
        jitter = max(1e-8, 1e-6 * np.trace(cov) / self.feat_dim)
        eye = np.eye(self.feat_dim)
        for _ in range(max_doublings + 1):
            try:
                return np.linalg.cholesky(cov + jitter * eye)
            except np.linalg.LinAlgError:
                jitter *= 2
        raise CovarianceError(f"covariance of class {k} is not positive definite even with jitter {jitter / 2:g}")

    def copy(self) -> "ClassCovarianceTracker":
        out = ClassCovarianceTracker(self.n_classes, self.feat_dim)
        out.count, out.mean, out.m2 = self.count.copy(), self.mean.copy(), self.m2.copy()
        return out


def normalize_rows(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-L2 rows and a mask of the all-zero rows (which stay zero)."""
    g = np.asarray(g, dtype=np.float64)
    peak = np.abs(g).max(axis=1, keepdims=True)
    zero = peak[:, 0] == 0
    scaled = g / np.where(zero[:, None], 1.0, peak)  # guards against under/overflow in the norm
    norm = np.sqrt((scaled ** 2).sum(axis=1, keepdims=True))
    return scaled / np.where(zero[:, None], 1.0, norm), zero


def sample_feature_directions(tracker: ClassCovarianceTracker, labels: np.ndarray,
                              rng: np.random.Generator) -> np.ndarray:
    """Un-normalized draws: row i from N(0, Sigma_{labels[i]})."""
    labels = np.asarray(labels)
    z = rng.standard_normal((labels.size, tracker.feat_dim))
    out = np.empty_like(z)
    for k in np.unique(labels):
        rows = labels == k
        out[rows] = z[rows] @ tracker.factor(int(k)).T
    return out


def sample_directions(tracker: ClassCovarianceTracker, pseudo_labels: np.ndarray,
                      rng: np.random.Generator, class_aware: bool = True):
    """Unit starting directions ``(d_c, d_f)``, one row per point."""
    n = np.asarray(pseudo_labels).size
    d_c = rng.standard_normal((n, 3))
    if class_aware:
        d_f = sample_feature_directions(tracker, pseudo_labels, rng)
    else:
        d_f = rng.standard_normal((n, tracker.feat_dim))
    return normalize_rows(d_c)[0], normalize_rows(d_f)[0]


@dataclass
class PerturbedCloud:
    cloud: PointCloud
    source: PointCloud
    r_c: np.ndarray
    r_f: np.ndarray


@dataclass
class LapDiagnostics:
    lds: float
    mean_norm_gc: float
    mean_norm_gf: float
    zero_rows_c: int
    zero_rows_f: int
    class_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def csv_row(self, step: int) -> list:
        return [step, self.lds, self.mean_norm_gc, self.mean_norm_gf, *self.class_counts.tolist()]


def local_divergence_gradient(cloud: PointCloud, params: ModelParams, clean_probs: np.ndarray,
                              r_c: np.ndarray, r_f: np.ndarray, k: int = 8):
    """KL(clean || prediction at (C + r_c, F + r_f)) and its gradients in r_c, r_f."""
    graph = Graph()
    nodes = register_params(graph, params, trainable=False)
    rc = graph.leaf(r_c)
    rf = graph.leaf(r_f)
    coords = graph.add(graph.constant(cloud.coords), rc)
    feats = graph.add(graph.constant(cloud.feats), rf)
    out = network(graph, coords, feats, nodes, knn_index(coords.value, k, cloud.batch))
    lds = graph.kl_divergence_rows(graph.constant(clean_probs), graph.log_softmax_rows(out))
    grads = graph.backward(lds)
    return lds.item(), grads[rc.id], grads[rf.id]


def _shift(base: np.ndarray, r: np.ndarray, eps: float) -> np.ndarray:
    return base.copy() if eps == 0 else base + r


def generate_lap(cloud: PointCloud, params: ModelParams, config: LapConfig,
                 tracker: ClassCovarianceTracker, rng: np.random.Generator, *,
                 class_aware: bool = True, perturb_coords: bool = True,
                 clean_logits: np.ndarray | None = None, update_tracker: bool = True,
                 k: int = 8) -> tuple[PerturbedCloud, LapDiagnostics]:
    """Adversarially perturbed copy of ``cloud``.

    Each point's coordinate shift has norm ``eps_c`` and its feature shift
    norm ``eps_f``, except points whose gradient vanished, which stay put.
    The tracker is first updated with this cloud's features under the
    current pseudo-labels.
    """
    if clean_logits is None:
        clean_logits = logits(cloud, params, k)
    probs = softmax(clean_logits)
    pseudo = predict_labels(clean_logits)
    if update_tracker:
        tracker.update(cloud.feats, pseudo)
    d_c, d_f = sample_directions(tracker, pseudo, rng, class_aware)
    if not perturb_coords:
        d_c = np.zeros_like(d_c)

    for _ in range(config.ip):
        lds, g_c, g_f = local_divergence_gradient(cloud, params, probs,
                                                  config.xi_c * d_c, config.xi_f * d_f, k)
        if not perturb_coords:
            g_c = np.zeros_like(g_c)
        d_c, zero_c = normalize_rows(g_c)
        d_f, zero_f = normalize_rows(g_f)

    r_c = config.eps_c * d_c
    r_f = config.eps_f * d_f
    out = cloud.replace(_shift(cloud.coords, r_c, config.eps_c), _shift(cloud.feats, r_f, config.eps_f))
    diag = LapDiagnostics(lds, float(np.linalg.norm(g_c, axis=1).mean()),
                          float(np.linalg.norm(g_f, axis=1).mean()),
                          int(zero_c.sum()) if perturb_coords else 0, int(zero_f.sum()),
                          tracker.count.copy())
    return PerturbedCloud(out, cloud, r_c, r_f), diag


def random_local_perturbation(cloud: PointCloud, config: LapConfig, rng: np.random.Generator,
                              coords: bool = True, feats: bool = True) -> PerturbedCloud:
    """Isotropic random shifts with the same per-point norms as the adaptive ones."""
    d_c = normalize_rows(rng.standard_normal(cloud.coords.shape))[0]
    d_f = normalize_rows(rng.standard_normal(cloud.feats.shape))[0]
    r_c = config.eps_c * d_c if coords else np.zeros_like(d_c)
    r_f = config.eps_f * d_f if feats else np.zeros_like(d_f)
    out = cloud.replace(_shift(cloud.coords, r_c, config.eps_c if coords else 0),
                        _shift(cloud.feats, r_f, config.eps_f if feats else 0))
    return PerturbedCloud(out, cloud, r_c, r_f)
