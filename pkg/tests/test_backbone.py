import numpy as np
import pytest

from datseg.autodiff import Graph
from datseg.backbone import (ModelParams, PointCloud, forward, init_params, knn_index, logits,
                             predict_labels, predict_probabilities)
from helpers import numeric_grad, rel_error


def random_cloud(rng, n=24, feat_dim=4):
    return PointCloud(rng.uniform(-1, 1, (n, 3)), rng.uniform(0, 1, (n, feat_dim)))


def test_knn_collinear_example():
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]])
    assert set(knn_index(coords, 2)[0]) == {0, 1}


def test_knn_k1_is_self():
    rng = np.random.default_rng(0)
    coords = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(knn_index(coords, 1)[:, 0], np.arange(30))


def test_knn_matches_exhaustive_sort():
    rng = np.random.default_rng(1)
    coords = rng.normal(size=(64, 3))
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    oracle = np.array([sorted(range(64), key=lambda j: (d[i, j], j))[:8] for i in range(64)])
    np.testing.assert_array_equal(knn_index(coords, 8), oracle)


def test_knn_tie_break_prefers_lower_index():
    # grid points: many equal distances
    g = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0), [0.0]), -1).reshape(-1, 3)
    out = knn_index(g, 5)
    d = ((g[:, None] - g[None]) ** 2).sum(-1)
    for i in range(len(g)):
        idx = np.arange(len(g))
        expect = np.lexsort((idx, idx != i, d[i]))[:5]
        np.testing.assert_array_equal(out[i], expect)


def test_knn_errors_and_batches():
    with pytest.raises(ValueError):
        knn_index(np.zeros((3, 3)), 4)
    rng = np.random.default_rng(2)
    coords = rng.normal(size=(20, 3))
    batch = np.repeat([0, 1], 10)
    out = knn_index(coords, 3, batch)
    assert np.all(batch[out] == batch[:, None])


def test_zero_parameters_give_uniform_probabilities():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng)
    out = logits(cloud, ModelParams.zeros(4, 5))
    np.testing.assert_array_equal(out, 0)
    np.testing.assert_allclose(predict_probabilities(out), 1 / 5)


def test_forward_is_permutation_equivariant():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, n=40)
    params = init_params(4, 6, rng)
    perm = rng.permutation(40)
    base = logits(cloud, params)
    shuffled = logits(PointCloud(cloud.coords[perm], cloud.feats[perm]), params)
    np.testing.assert_allclose(shuffled, base[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_input_and_parameter_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n=12)
    params = init_params(4, 3, rng, hidden1=6, hidden2=5)
    weights = rng.normal(size=(12, 3))

    g = Graph()
    fp = forward(cloud, params, g, k=3)
    loss = g.sum(g.mul(fp.logits, g.constant(weights)))
    grads = g.backward(loss)
    neighbors = knn_index(cloud.coords, 3)

    def value(c, f, p):
        from datseg.backbone import network, register_params
        gg = Graph()
        return (network(gg, gg.constant(c), gg.constant(f), register_params(gg, p, False), neighbors).value
                * weights).sum()

    # neighbors held fixed: they are treated as constants by design
    num_c = numeric_grad(lambda c: value(c, cloud.feats, params), cloud.coords)
    num_f = numeric_grad(lambda f: value(cloud.coords, f, params), cloud.feats)
    assert np.abs(grads[fp.coords.id]).sum() > 0
    assert rel_error(grads[fp.coords.id], num_c) < 1e-4
    assert rel_error(grads[fp.feats.id], num_f) < 1e-4
    for name in ("enc1_w", "head1_w"):
        def f(w, name=name):
            p = params.copy()
            p.arrays[name] = w
            return value(cloud.coords, cloud.feats, p)
        assert rel_error(grads[fp.params[name].id], numeric_grad(f, params[name])) < 1e-4


def test_predictions_examples():
    out = np.array([[0.0, 0, 0], [1, 5, 2]])
    np.testing.assert_allclose(predict_probabilities(out)[0], [1 / 3] * 3)
    np.testing.assert_array_equal(predict_labels(out), [0, 1])


def test_argmax_matches_linear_scan():
    rng = np.random.default_rng(5)
    out = rng.integers(-3, 3, size=(200, 6)).astype(float)
    scan = []
    for row in out:
        best = 0
        for j in range(1, 6):
            if row[j] > row[best]:
                best = j
        scan.append(best)
    np.testing.assert_array_equal(predict_labels(out), scan)
    assert np.abs(predict_probabilities(out).sum(1) - 1).max() < 1e-9


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        PointCloud(np.full((1, 3), np.nan), np.zeros((1, 4)))


def test_feature_dimension_mismatch():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError, match="feature"):
        forward(random_cloud(rng, feat_dim=3), init_params(4, 3, rng))
