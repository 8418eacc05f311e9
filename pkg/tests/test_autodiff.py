import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datseg.autodiff import Graph, GraphIndexError, ShapeError, log_softmax, softmax
from helpers import numeric_grad, rel_error


def check_unary(build, x, weights, h=1e-5):
    """Compare backward of sum(weights * build(x)) against central differences."""
    g = Graph()
    leaf = g.leaf(x)
    out = build(g, leaf)
    loss = g.sum(g.mul(out, g.constant(weights)))
    analytic = g.backward(loss)[leaf.id]

    def f(v):
        gg = Graph()
        return float((build(gg, gg.constant(v)).value * weights).sum())

    return rel_error(analytic, numeric_grad(f, x, h))


def out_shape(build, x):
    g = Graph()
    return build(g, g.constant(x)).shape


def away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300), x)


UNARY = {
    "relu": lambda g, x: g.relu(x),
    "softmax_rows": lambda g, x: g.softmax_rows(x),
    "log_softmax_rows": lambda g, x: g.log_softmax_rows(x),
    "scale": lambda g, x: g.scale(x, -1.7),
    "sum": lambda g, x: g.sum(x),
    "gather_rows": lambda g, x: g.gather_rows(x, np.array([0, 2, 2, 1, 0])[: x.shape[0] + 2] % x.shape[0]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_unary_primitives_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 6)), int(rng.integers(1, 5)))
    x = away_from_zero(rng, shape)
    w = rng.uniform(-2, 2, size=out_shape(UNARY[name], x))
    assert check_unary(UNARY[name], x, w) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_binary_primitives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m, p = (int(v) for v in rng.integers(1, 6, size=3))
    a = rng.uniform(-2, 2, (n, m))
    b = rng.uniform(-2, 2, (m, p))
    row = rng.uniform(-2, 2, (1, m))
    other = rng.uniform(-2, 2, (n, p))
    cases = {
        "matmul_a": (a, lambda g, x: g.matmul(x, g.constant(b))),
        "matmul_b": (b, lambda g, x: g.matmul(g.constant(a), x)),
        "add_row": (row, lambda g, x: g.add(g.constant(a), x)),
        "add_same": (a, lambda g, x: g.add(x, g.constant(a * 0.5))),
        "mul": (a, lambda g, x: g.mul(x, g.constant(a + 1))),
        "concat_left": (a, lambda g, x: g.concat_columns(x, g.constant(other))),
        "concat_right": (other, lambda g, x: g.concat_columns(g.constant(a), x)),
    }
    for name, (x, build) in cases.items():
        w = rng.uniform(-2, 2, size=out_shape(build, x))
        assert check_unary(build, x, w) < 1e-4, name


@pytest.mark.parametrize("seed", range(20))
def test_row_max_over_groups_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, width, k = int(rng.integers(2, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    # distinct values keep every max strict, so the function is smooth locally
    x = rng.permutation(n * width).reshape(n, width) * 0.1 - 1.0
    groups = rng.integers(0, n, size=(n, k))
    w = rng.uniform(-2, 2, size=(n, width))
    assert check_unary(lambda g, v: g.row_max_over_groups(v, groups), x, w) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_losses_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = rng.uniform(-2, 2, (n, k))
    p = softmax(rng.uniform(-2, 2, (n, k)))
    labeled = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
    classes = rng.integers(0, k, size=labeled.size)

    def kl_q(g, x):
        return g.kl_divergence_rows(g.constant(p), g.log_softmax_rows(x))

    def kl_p(g, x):
        return g.kl_divergence_rows(x, g.constant(log_softmax(logits)))

    def ce(g, x):
        return g.cross_entropy_sparse(x, labeled, classes)

    other = rng.uniform(-2, 2, (n, k))

    def kl_logits_b(g, x):
        return g.kl_divergence_logits(g.constant(other), x)

    def kl_logits_a(g, x):
        return g.kl_divergence_logits(x, g.constant(other))

    one = np.ones((1, 1))
    assert check_unary(kl_q, logits, one) < 1e-4
    assert check_unary(kl_p, p, one) < 1e-4
    assert check_unary(ce, logits, one) < 1e-4
    assert check_unary(kl_logits_b, logits, one) < 1e-4
    assert check_unary(kl_logits_a, logits, one) < 1e-4


# -- spec examples -----------------------------------------------------------

def test_relu_example():
    g = Graph()
    np.testing.assert_array_equal(g.relu(g.constant([[-1.0, 2.0]])).value, [[0.0, 2.0]])


def test_softmax_example():
    g = Graph()
    np.testing.assert_allclose(g.softmax_rows(g.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for t in range(4):
                ref[i, j] += a[i, t] * b[t, j]
    g = Graph()
    assert np.abs(g.matmul(g.constant(a), g.constant(b)).value - ref).max() < 1e-12


def test_kl_examples():
    g = Graph()
    q = np.log(np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]]))
    assert abs(g.kl_divergence_rows(g.constant(np.exp(q)), g.constant(q)).item()) < 1e-15
    half = np.log([[0.5, 0.5]])
    assert abs(g.kl_divergence_rows(g.constant([[1.0, 0.0]]), g.constant(half)).item() - np.log(2)) < 1e-12


def test_kl_matches_direct_summation():
    rng = np.random.default_rng(11)
    p = softmax(rng.normal(size=(5, 4)))
    qlog = log_softmax(rng.normal(size=(5, 4)))
    direct = 0.0
    for i in range(5):
        for j in range(4):
            direct += p[i, j] * (np.log(p[i, j]) - qlog[i, j])
    g = Graph()
    assert abs(g.kl_divergence_rows(g.constant(p), g.constant(qlog)).item() - direct / 5) < 1e-12


def test_kl_errors():
    g = Graph()
    with pytest.raises(ShapeError):
        g.kl_divergence_rows(g.constant(np.full((2, 2), 0.5)), g.constant(np.zeros((3, 2))))
    with pytest.raises(ValueError, match="negative"):
        g.kl_divergence_rows(g.constant([[1.1, -0.1]]), g.constant(np.log([[0.5, 0.5]])))


def test_cross_entropy_examples():
    g = Graph()
    labels = np.array([0, 2, 1])
    sat = np.zeros((4, 3))
    sat[np.arange(3), labels] = 50.0
    assert g.cross_entropy_sparse(g.constant(sat), [0, 1, 2], labels).item() < 1e-9
    uniform = g.constant(np.zeros((6, 13)))
    assert abs(g.cross_entropy_sparse(uniform, [1, 4], [3, 12]).item() - np.log(13)) < 1e-12


def test_cross_entropy_matches_per_point_oracle():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(7, 5))
    idx = np.array([0, 3, 6])
    cls = np.array([4, 0, 2])
    oracle = 0.0
    for i, c in zip(idx, cls):
        oracle -= logits[i, c] - np.log(np.exp(logits[i]).sum())
    g = Graph()
    assert abs(g.cross_entropy_sparse(g.constant(logits), idx, cls).item() - oracle / 3) < 1e-12


def test_cross_entropy_ignores_unlabeled_rows():
    rng = np.random.default_rng(4)
    g = Graph()
    x = g.leaf(rng.normal(size=(6, 3)))
    grad = g.backward(g.cross_entropy_sparse(x, [1, 4], [0, 2]))[x.id]
    assert np.all(grad[[0, 2, 3, 5]] == 0)
    with pytest.raises(ValueError, match="no supervision"):
        g.cross_entropy_sparse(x, [], [])


def test_backward_of_sum_is_ones():
    g = Graph()
    x = g.leaf(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(g.backward(g.sum(x))[x.id], np.ones((3, 4)))


def test_backward_requires_scalar():
    g = Graph()
    x = g.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        g.backward(g.relu(x))


def test_leaf_off_the_loss_path_gets_zero():
    g = Graph()
    x = g.leaf(np.ones((2, 3)))
    y = g.leaf(np.full((2, 3), 2.0))
    g.relu(y)
    grads = g.backward(g.sum(x))
    np.testing.assert_array_equal(grads[y.id], np.zeros((2, 3)))


def test_detach_product_rule():
    g = Graph()
    v = np.array([[1.5, -2.0, 0.25]])
    x = g.leaf(v)
    d = g.detach(x)
    np.testing.assert_array_equal(d.value, x.value)
    grad = g.backward(g.sum(g.mul(d, x)))[x.id]
    np.testing.assert_array_equal(grad, v)


def test_detached_target_gets_no_gradient():
    g = Graph()
    logits = g.leaf([[0.3, -1.0, 2.0]])
    other = g.leaf([[1.0, 0.0, 0.5]])
    target = g.softmax_rows(g.detach(logits))
    loss = g.kl_divergence_rows(target, g.log_softmax_rows(other))
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[logits.id], np.zeros((1, 3)))
    assert np.abs(grads[other.id]).sum() > 0


def test_shape_errors_name_the_primitive():
    g = Graph()
    a, b = g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        g.matmul(a, b)
    with pytest.raises(ShapeError, match="add"):
        g.add(a, g.constant(np.ones((1, 2))))
    with pytest.raises(ShapeError, match="concat_columns"):
        g.concat_columns(a, g.constant(np.ones((3, 1))))


def test_index_errors_report_position():
    g = Graph()
    a = g.constant(np.ones((3, 2)))
    with pytest.raises(GraphIndexError, match=r"position \(1,\)"):
        g.gather_rows(a, [0, 3])
    with pytest.raises(GraphIndexError, match=r"position \(0, 1\)"):
        g.row_max_over_groups(a, [[0, -1], [1, 2], [2, 0]])
    with pytest.raises(GraphIndexError):
        g.cross_entropy_sparse(a, [0], [5])


def test_nodes_from_another_graph_are_rejected():
    g1, g2 = Graph(), Graph()
    x = g1.constant(np.ones((1, 1)))
    g2.constant(np.ones((1, 1)))
    with pytest.raises(ValueError, match="different graph"):
        g2.relu(x)


def test_backward_is_deterministic():
    rng = np.random.default_rng(9)
    x0, w0 = rng.normal(size=(6, 4)), rng.normal(size=(4, 3))

    def run():
        g = Graph()
        x, w = g.leaf(x0), g.leaf(w0)
        h = g.row_max_over_groups(g.relu(g.matmul(x, w)), np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 0]]))
        loss = g.cross_entropy_sparse(h, [0, 3], [1, 2])
        gr = g.backward(loss)
        return gr[x.id].tobytes(), gr[w.id].tobytes()

    assert run() == run()


# -- invariants --------------------------------------------------------------

rows = st.integers(1, 6)
cols = st.integers(1, 6)


@settings(max_examples=60, deadline=None)
@given(rows, cols, st.integers(0, 2 ** 31 - 1), st.floats(0.1, 30))
def test_softmax_rows_on_simplex(n, k, seed, spread):
    x = np.random.default_rng(seed).normal(size=(n, k)) * spread
    g = Graph()
    p = g.softmax_rows(g.constant(x)).value
    assert np.all(p > 0)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9


@settings(max_examples=60, deadline=None)
@given(rows, st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_kl_non_negative_and_zero_only_at_equality(n, k, seed):
    rng = np.random.default_rng(seed)
    p = softmax(rng.normal(size=(n, k)) * 3)
    qlog = log_softmax(rng.normal(size=(n, k)) * 3)
    g = Graph()
    kl = g.kl_divergence_rows(g.constant(p), g.constant(qlog)).item()
    assert kl >= 0
    if kl < 1e-9:
        assert np.abs(p - np.exp(qlog)).max() < 1e-3
    assert abs(g.kl_divergence_rows(g.constant(p), g.constant(np.log(p))).item()) < 1e-9


def test_kl_from_logits():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    g = Graph()
    assert g.kl_divergence_logits(g.constant(a), g.constant(a)).item() == 0.0
    direct = g.kl_divergence_rows(g.constant(softmax(a)), g.constant(log_softmax(b))).item()
    assert abs(g.kl_divergence_logits(g.constant(a), g.constant(b)).item() - direct) < 1e-12
    leaf = g.leaf(a)
    grads = g.backward(g.kl_divergence_logits(g.detach(leaf), g.leaf(b)))
    np.testing.assert_array_equal(grads[leaf.id], 0)
