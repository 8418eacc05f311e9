"""Weakly supervised point-cloud segmentation with adversarial local and regional transformations."""
from .annotation import LabeledScene, WeakLabels, sample_labels
from .autodiff import Graph, Node
from .backbone import ModelParams, PointCloud, forward, init_params, logits, predict_labels
from .lap import ClassCovarianceTracker, LapConfig, generate_lap
from .rad import AffineParams, RadConfig, apply_affine, generate_rad, partition_superpoints
from .scenegen import SceneSpec, generate_dataset, generate_scene
from .trainer import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"
