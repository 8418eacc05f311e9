"""Consistency-regularised training on sparse labels, and mIoU evaluation.

Every step pays the cross-entropy on the labeled points. On top of that it
adds ``alpha * KL(clean || local perturbation)`` or
``beta * KL(clean || regional deformation)``; by default one of the two,
picked by a coin flip. The clean prediction is always a fixed (detached)
target.
"""
from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .annotation import LabeledScene, WeakLabels
from .autodiff import Graph, Node
from .backbone import ModelParams, PointCloud, init_params, knn_index, logits, network, predict_labels, register_params
from .lap import ClassCovarianceTracker, LapConfig, LapDiagnostics, generate_lap, random_local_perturbation
from .rad import RadConfig, SuperpointPartition, generate_rad, partition_superpoints

log = logging.getLogger(__name__)

NOISE_MODES = ("off", "coords", "feats", "both")
BRANCH_MODES = ("random", "both")
LOG_COLUMNS = ("step", "branch", "L_seg", "L_lc", "L_rc", "L_total", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, config: "TrainConfig"):
        self.step = step
        self.config = config
        super().__init__(f"non-finite loss at step {step}; config: {asdict(config)}")


@dataclass
class TrainConfig:
    alpha: float = 2.0
    beta: float = 2.0
    lr: float = 0.01
    batch_scenes: int = 2
    steps: int = 200
    branch_prob: float = 0.5
    branch_mode: str = "random"
    use_lap: bool = True
    use_rad: bool = True
    noise_baseline: str = "off"
    use_cpg: bool = True
    perturb_coords: bool = True
    seed: int = 0
    k: int = 8
    hidden1: int = 32
    hidden2: int = 32
    eval_every: int = 0
    lap: LapConfig = field(default_factory=LapConfig)
    rad: RadConfig = field(default_factory=RadConfig)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 <= self.branch_prob <= 1:
            raise ValueError("branch_prob must lie in [0, 1]")
        if self.noise_baseline not in NOISE_MODES:
            raise ValueError(f"noise_baseline must be one of {NOISE_MODES}")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.batch_scenes < 1 or self.steps < 0 or self.k < 1:
            raise ValueError("batch_scenes and k must be positive, steps non-negative")

    @property
    def local_enabled(self) -> bool:
        return self.use_lap or self.noise_baseline != "off"

    @property
    def regional_enabled(self) -> bool:
        return self.use_rad and self.perturb_coords


@dataclass
class TrainState:
    params: ModelParams
    tracker: ClassCovarianceTracker
    rng: np.random.Generator
    step: int = 0


@dataclass
class StepReport:
    step: int
    branch: str
    L_seg: float
    L_lc: float
    L_rc: float
    L_total: float
    lr: float
    lap: LapDiagnostics | None = None

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class Batch:
    """Several scenes stacked into one cloud, with labels and superpoints re-indexed."""

    cloud: PointCloud
    labels: WeakLabels
    partition: SuperpointPartition


def make_batch(clouds: Sequence[PointCloud], labels: Sequence[WeakLabels],
               partitions: Sequence[SuperpointPartition]) -> Batch:
    offsets = np.cumsum([0] + [c.n_points for c in clouds])
    region_offsets = np.cumsum([0] + [p.n_regions for p in partitions])
    cloud = PointCloud(np.concatenate([c.coords for c in clouds]),
                       np.concatenate([c.feats for c in clouds]),
                       np.repeat(np.arange(len(clouds)), np.diff(offsets)))
    weak = WeakLabels(np.concatenate([w.indices + o for w, o in zip(labels, offsets)]),
                      np.concatenate([w.classes for w in labels]))
    part = SuperpointPartition(
        np.concatenate([p.region_of + o for p, o in zip(partitions, region_offsets)]),
        int(region_offsets[-1]), np.concatenate([p.centroids for p in partitions]))
    return Batch(cloud, weak, part)


def choose_branches(config: TrainConfig, rng: np.random.Generator) -> tuple[str, ...]:
    local, regional = config.local_enabled, config.regional_enabled
    if local and regional:
        if config.branch_mode == "both":
            return ("lap", "rad")
        return ("lap",) if rng.random() < config.branch_prob else ("rad",)
    if local:
        return ("lap",)
    if regional:
        return ("rad",)
    return ()


def consistency_term(graph: Graph, clean: Node, cloud: PointCloud, params: dict[str, Node],
                     k: int) -> Node:
    """KL(detached clean prediction || prediction on ``cloud``)."""
    out = network(graph, graph.constant(cloud.coords), graph.constant(cloud.feats), params,
                  knn_index(cloud.coords, k, cloud.batch))
    return graph.kl_divergence_logits(graph.detach(clean), out)


def local_example(batch: Batch, state: TrainState, config: TrainConfig,
                  clean_logits: np.ndarray):
    if config.noise_baseline != "off":
        mode = config.noise_baseline
        pert = random_local_perturbation(batch.cloud, config.lap, state.rng,
                                         coords=mode in ("coords", "both") and config.perturb_coords,
                                         feats=mode in ("feats", "both"))
        return pert.cloud, None
    pert, diag = generate_lap(batch.cloud, state.params, config.lap, state.tracker, state.rng,
                              class_aware=config.use_cpg, perturb_coords=config.perturb_coords,
                              clean_logits=clean_logits, k=config.k)
    return pert.cloud, diag


def regional_example(batch: Batch, state: TrainState, config: TrainConfig,
                     clean_logits: np.ndarray) -> PointCloud:
    cloud, _, _ = generate_rad(batch.cloud, batch.partition, state.params, config.rad, state.rng,
                               clean_logits=clean_logits, ip=config.lap.ip, k=config.k)
    return cloud


def train_step(batch: Batch, state: TrainState, config: TrainConfig) -> StepReport:
    """One SGD step on ``L_seg + alpha L_lc + beta L_rc``; updates ``state`` in place."""
    graph = Graph()
    nodes = register_params(graph, state.params)
    cloud = batch.cloud
    clean = network(graph, graph.constant(cloud.coords), graph.constant(cloud.feats), nodes,
                    knn_index(cloud.coords, config.k, cloud.batch))
    seg = graph.cross_entropy_sparse(clean, batch.labels.indices, batch.labels.classes)
    total = seg
    branches = choose_branches(config, state.rng)
    l_lc = l_rc = 0.0
    diag = None
    if "lap" in branches:
        pert, diag = local_example(batch, state, config, clean.value)
        term = consistency_term(graph, clean, pert, nodes, config.k)
        l_lc = term.item()
        total = graph.add(total, graph.scale(term, config.alpha))
    if "rad" in branches:
        deformed = regional_example(batch, state, config, clean.value)
        term = consistency_term(graph, clean, deformed, nodes, config.k)
        l_rc = term.item()
        total = graph.add(total, graph.scale(term, config.beta))

    if not np.isfinite(total.item()):
        raise TrainingDiverged(state.step, config)
    grads = graph.backward(total)
    state.params = ModelParams({name: value - config.lr * grads[nodes[name].id]
                                for name, value in state.params.items()})
    report = StepReport(state.step, "+".join(branches) or "seg", seg.item(), l_lc, l_rc,
                        total.item(), config.lr, diag)
    state.step += 1
    return report


def check_dataset(scenes: Sequence[LabeledScene]) -> tuple[int, int]:
    if not scenes:
        raise ValueError("dataset is empty")
    dims = {(s.n_classes, s.cloud.feat_dim) for s in scenes}
    if len(dims) != 1:
        raise ValueError(f"scenes disagree on (classes, feature dim): {sorted(dims)}")
    return dims.pop()


def init_state(n_classes: int, feat_dim: int, config: TrainConfig) -> TrainState:
    init_seq, train_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(feat_dim, n_classes, np.random.default_rng(init_seq),
                         config.hidden1, config.hidden2)
    return TrainState(params, ClassCovarianceTracker(n_classes, feat_dim),
                      np.random.default_rng(train_seq))


@dataclass
class TrainResult:
    params: ModelParams
    log: list[StepReport]
    validation: list[tuple[int, "Metrics"]]
    tracker: ClassCovarianceTracker


def train(scenes: Sequence[LabeledScene], weak_labels: Sequence[WeakLabels], config: TrainConfig,
          val_scenes: Sequence[LabeledScene] | None = None) -> TrainResult:
    n_classes, feat_dim = check_dataset(scenes)
    if len(weak_labels) != len(scenes):
        raise ValueError("need one WeakLabels per scene")
    if val_scenes:
        if check_dataset(val_scenes) != (n_classes, feat_dim):
            raise ValueError("validation scenes do not match the training dimensions")
    state = init_state(n_classes, feat_dim, config)
    partitions = [partition_superpoints(s.cloud, config.rad.cell_size) for s in scenes]
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    queue: list[int] = []
    reports, validation = [], []
    per_batch = min(config.batch_scenes, len(scenes))
    for _ in range(config.steps):
        if len(queue) < per_batch:
            queue.extend(order_rng.permutation(len(scenes)).tolist())
        picked, queue = queue[:per_batch], queue[per_batch:]
        batch = make_batch([scenes[i].cloud for i in picked], [weak_labels[i] for i in picked],
                           [partitions[i] for i in picked])
        report = train_step(batch, state, config)
        reports.append(report)
        if config.eval_every and val_scenes and state.step % config.eval_every == 0:
            metrics = evaluate(val_scenes, state.params, config.k)
            validation.append((state.step, metrics))
            log.info("step %d: L_total %.4f, val mIoU %.4f", state.step, report.L_total, metrics.miou)
    return TrainResult(state.params, reports, validation, state.tracker)


@dataclass
class Metrics:
    intersection: np.ndarray
    union: np.ndarray
    gt_count: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.intersection.size

    @property
    def present(self) -> np.ndarray:
        return self.gt_count > 0

    @property
    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.present, self.intersection / np.maximum(self.gt_count, 1), np.nan)

    @property
    def miou(self) -> float:
        """Mean IoU over the classes that occur in the ground truth.

        Computed as an exact rational and rounded once, so the value does
        not depend on summation order.
        """
        if not self.present.any():
            return float("nan")
        ious = [Fraction(int(i), int(u)) for i, u in
                zip(self.intersection[self.present], self.union[self.present])]
        return float(sum(ious) / len(ious))


def confusion_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> Metrics:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"{pred.size} predictions for {gt.size} labels")
    conf = np.bincount(gt * n_classes + pred, minlength=n_classes ** 2).reshape(n_classes, n_classes)
    inter = np.diag(conf).astype(np.int64)
    gt_count = conf.sum(axis=1)
    union = gt_count + conf.sum(axis=0) - inter
    return Metrics(inter, union, gt_count)


def evaluate(scenes: Sequence[LabeledScene], params: ModelParams, k: int = 8) -> Metrics:
    """Dense hard predictions against ground truth, accumulated over all scenes."""
    n_classes, feat_dim = check_dataset(scenes)
    if (params.n_classes, params.feat_dim) != (n_classes, feat_dim):
        raise ValueError(f"checkpoint expects {params.n_classes} classes and {params.feat_dim} features, "
                         f"data has {n_classes} and {feat_dim}")
    total = None
    for scene in scenes:
        m = confusion_metrics(predict_labels(logits(scene.cloud, params, k)), scene.gt_classes, n_classes)
        if total is None:
            total = m
        else:
            total = Metrics(total.intersection + m.intersection, total.union + m.union,
                            total.gt_count + m.gt_count)
    return total
