import copy
from fractions import Fraction

import numpy as np
import pytest

from datseg.annotation import LabeledScene, sample_labels
from datseg.autodiff import log_softmax, softmax
from datseg.backbone import PARAM_NAMES, PointCloud, logits
from datseg.lap import generate_lap
from datseg.rad import partition_superpoints
from datseg.scenegen import SceneSpec, generate_dataset
from datseg.trainer import (TrainConfig, TrainingDiverged, confusion_metrics, evaluate, init_state,
                            make_batch, train, train_step)
from helpers import numeric_grad, rel_error


@pytest.fixture(scope="module")
def data():
    scenes = generate_dataset(SceneSpec(n_points=256), 4, 21)
    rng = np.random.default_rng(0)
    return scenes, [sample_labels(s, "otoc", rng) for s in scenes]


def batch_of(scenes, labels, cell=0.5):
    return make_batch([s.cloud for s in scenes], labels,
                      [partition_superpoints(s.cloud, cell) for s in scenes])


def numpy_cross_entropy(out, idx, cls):
    return -log_softmax(out[idx])[np.arange(len(idx)), cls].mean()


def numpy_kl(p, out):
    return (p * (np.log(p) - log_softmax(out))).sum(1).mean()


def test_zero_weights_equal_plain_segmentation_step(data):
    scenes, labels = data
    batch = batch_of(scenes[:2], labels[:2])
    states = []
    for cfg in (TrainConfig(alpha=0, beta=0), TrainConfig(use_lap=False, use_rad=False)):
        state = init_state(6, 4, cfg)
        train_step(batch, state, cfg)
        states.append(state)
    for name, value in states[0].params.items():
        np.testing.assert_array_equal(value, states[1].params[name])


def test_small_step_decreases_segmentation_loss(data):
    scenes, labels = data
    batch = batch_of(scenes[:2], labels[:2])
    cfg = TrainConfig(lr=1e-3, use_lap=False, use_rad=False)
    state = init_state(6, 4, cfg)
    before = train_step(batch, state, cfg).L_seg
    after = numpy_cross_entropy(logits(batch.cloud, state.params), batch.labels.indices,
                                batch.labels.classes)
    assert after < before


def test_total_loss_matches_independent_recomputation(data):
    scenes, labels = data
    batch = batch_of(scenes[:2], labels[:2])
    cfg = TrainConfig(use_rad=False)
    state = init_state(6, 4, cfg)
    params0, tracker0, rng0 = state.params.copy(), state.tracker.copy(), copy.deepcopy(state.rng)
    report = train_step(batch, state, cfg)

    clean = logits(batch.cloud, params0)
    pert, _ = generate_lap(batch.cloud, params0, cfg.lap, tracker0, rng0)
    seg = numpy_cross_entropy(clean, batch.labels.indices, batch.labels.classes)
    lc = numpy_kl(softmax(clean), logits(pert.cloud, params0))
    assert abs(report.L_seg - seg) < 1e-10
    assert abs(report.L_lc - lc) < 1e-10
    assert abs(report.L_total - (seg + 2 * lc)) < 1e-10


def test_clean_target_receives_no_gradient(data):
    """Update direction equals the gradient with the clean prediction frozen as a constant."""
    scenes, labels = data
    batch = batch_of(scenes[:1], labels[:1])
    cfg = TrainConfig(use_rad=False, lr=1.0, hidden1=6, hidden2=5)
    state = init_state(6, 4, cfg)
    params0, tracker0, rng0 = state.params.copy(), state.tracker.copy(), copy.deepcopy(state.rng)
    train_step(batch, state, cfg)
    step = {n: params0[n] - state.params[n] for n in PARAM_NAMES}

    pert, _ = generate_lap(batch.cloud, params0, cfg.lap, tracker0, rng0)
    target = softmax(logits(batch.cloud, params0))

    def objective(w):
        p = params0.copy()
        p.arrays["head2_w"] = w
        return (numpy_cross_entropy(logits(batch.cloud, p), batch.labels.indices, batch.labels.classes)
                + 2 * numpy_kl(target, logits(pert.cloud, p)))

    assert rel_error(step["head2_w"], numeric_grad(objective, params0["head2_w"])) < 1e-4


def test_unlabeled_ground_truth_never_reaches_training(data):
    scenes, labels = data
    cfg = TrainConfig(steps=3)
    scrambled = []
    rng = np.random.default_rng(1)
    for s, w in zip(scenes, labels):
        gt = rng.integers(0, 6, s.n_points)
        gt[w.indices] = w.classes
        scrambled.append(LabeledScene(s.cloud, gt, np.arange(s.n_points), 6))
    a = train(scenes, labels, cfg).params
    b = train(scrambled, labels, cfg).params
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(a[name], b[name])


def test_zero_steps_returns_initialization(data):
    scenes, labels = data
    cfg = TrainConfig(steps=0)
    result = train(scenes, labels, cfg)
    init = init_state(6, 4, cfg).params
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(result.params[name], init[name])
    assert result.log == []


def test_same_seed_same_checkpoint(data):
    scenes, labels = data
    cfg = TrainConfig(steps=4)
    a, b = train(scenes, labels, cfg), train(scenes, labels, cfg)
    for name in PARAM_NAMES:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    assert [r.row() for r in a.log] == [r.row() for r in b.log]
    c = train(scenes, labels, TrainConfig(steps=4, seed=1))
    assert not np.array_equal(a.params["enc1_w"], c.params["enc1_w"])


def test_branch_selection():
    rng = np.random.default_rng(2)
    from datseg.trainer import choose_branches
    picks = [choose_branches(TrainConfig(), rng) for _ in range(2000)]
    frac = np.mean([p == ("lap",) for p in picks])
    assert abs(frac - 0.5) < 0.05
    assert choose_branches(TrainConfig(branch_mode="both"), rng) == ("lap", "rad")
    assert choose_branches(TrainConfig(perturb_coords=False), rng) == ("lap",)
    assert choose_branches(TrainConfig(use_lap=False, use_rad=False, noise_baseline="both"), rng) == ("lap",)
    assert choose_branches(TrainConfig(use_lap=False, use_rad=False), rng) == ()


def test_feature_only_mode_keeps_coordinates(data):
    scenes, labels = data
    batch = batch_of(scenes[:1], labels[:1])
    cfg = TrainConfig(perturb_coords=False)
    state = init_state(6, 4, cfg)
    report = train_step(batch, state, cfg)
    assert report.branch == "lap"
    assert report.lap.mean_norm_gc == 0


def test_divergence_aborts_with_config(data):
    scenes, labels = data
    with pytest.raises(TrainingDiverged) as err:
        train(scenes, labels, TrainConfig(lr=1e150, steps=10, use_lap=False, use_rad=False))
    assert "lr" in str(err.value)


def test_dimension_errors(data):
    scenes, labels = data
    odd = LabeledScene(PointCloud(scenes[0].cloud.coords, scenes[0].cloud.feats[:, :3]),
                       scenes[0].gt_classes, scenes[0].instance_ids, 6)
    with pytest.raises(ValueError, match="disagree"):
        train([scenes[0], odd], labels[:2], TrainConfig(steps=1))
    params = train(scenes, labels, TrainConfig(steps=0)).params
    with pytest.raises(ValueError, match="features"):
        evaluate([odd], params)


@pytest.mark.slow
def test_training_beats_uniform_predictor():
    scenes = generate_dataset(SceneSpec(), 10, 5)
    rng = np.random.default_rng(3)
    labels = [sample_labels(s, "otoc", rng) for s in scenes]
    result = train(scenes, labels, TrainConfig(steps=200))
    miou = evaluate(scenes, result.params).miou
    # expected IoU of a predictor choosing each class with probability 1/K
    gt = np.concatenate([s.gt_classes for s in scenes])
    n, k = gt.size, 6
    counts = np.bincount(gt, minlength=k)
    uniform = np.mean((counts / k) / (counts + n / k - counts / k))
    assert miou > uniform


def test_metric_examples():
    gt = np.array([0, 0, 1, 1])
    assert confusion_metrics(gt, gt, 2).miou == 1.0
    assert confusion_metrics(np.zeros(4, int), gt, 2).miou == 0.25


def set_oracle(pred, gt, k):
    ious = []
    for c in range(k):
        p = {i for i, v in enumerate(pred) if v == c}
        g = {i for i, v in enumerate(gt) if v == c}
        if g:
            ious.append(Fraction(len(p & g), len(p | g)))
    return float(sum(ious) / len(ious))


@pytest.mark.parametrize("seed", range(10))
def test_miou_matches_set_arithmetic(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    gt = rng.integers(0, k, 300)
    pred = np.where(rng.random(300) < 0.6, gt, rng.integers(0, k, 300))
    assert confusion_metrics(pred, gt, k).miou == set_oracle(pred, gt, k)


def test_evaluate_accumulates_over_scenes(data):
    scenes, labels = data
    params = train(scenes, labels, TrainConfig(steps=0)).params
    pred = np.concatenate([logits(s.cloud, params).argmax(1) for s in scenes])
    gt = np.concatenate([s.gt_classes for s in scenes])
    assert abs(evaluate(scenes, params).miou - set_oracle(pred, gt, 6)) < 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(noise_baseline="loud")
    with pytest.raises(ValueError):
        TrainConfig(branch_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
