"""
Training on one click per object
================================

A short ablation on a small synthetic set: plain cross-entropy on the
labeled points against the local, regional and combined consistency terms.
This is a quick look; the acceptance suite runs the full protocol.
"""
import time

import numpy as np

from datseg.annotation import sample_labels
from datseg.lap import LapConfig
from datseg.scenegen import SceneSpec, generate_dataset
from datseg.trainer import TrainConfig, evaluate, train

spec = SceneSpec(n_points=1024)
train_scenes = generate_dataset(spec, 20, seed=0)
test_scenes = generate_dataset(spec, 8, seed=999)
rng = np.random.default_rng(5)
labels = [sample_labels(s, "otoc", rng) for s in train_scenes]
print("labeled points per scene:", np.mean([len(w) for w in labels]))

lap = LapConfig(xi_c=1.0, eps_c=0.1)  # about one neighbour spacing
runs = {
    "baseline": dict(use_lap=False, use_rad=False),
    "local only": dict(use_rad=False),
    "regional only": dict(use_lap=False),
    "both": dict(),
}
for name, flags in runs.items():
    start = time.perf_counter()
    result = train(train_scenes, labels, TrainConfig(steps=300, lr=0.05, lap=lap, **flags))
    metrics = evaluate(test_scenes, result.params)
    print(f"{name:14s} mIoU {metrics.miou:.3f}  ({time.perf_counter() - start:.0f}s)")
    print("   per class", np.round(metrics.iou, 2))

# 300 steps on 20 small scenes is far from converged and single-seed numbers
# swing by several points; see the acceptance benchmark for a 5-seed comparison
