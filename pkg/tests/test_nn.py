import numpy as np
import pytest

from basgcn.align import backtracklessize
from basgcn.graphio import add_self_loops
from basgcn.nn import (
    Adam,
    Param,
    adam_step,
    avgpool_backward,
    avgpool_forward,
    conv1d_backward,
    conv1d_forward,
    dgcnn_conv,
    dropout_backward,
    dropout_forward,
    fc_backward,
    fc_forward,
    graph_conv_backward,
    graph_conv_forward,
    graph_conv_in,
    graph_conv_layer,
    graph_conv_out,
    propagation_matrix,
    row_normalize,
    softmax,
    softmax_cross_entropy,
)

from conftest import random_graph

EPS = 1e-5
RTOL = 1e-4


def numeric_grad(f, x):
    """Central differences of scalar f w.r.t. array x (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + EPS
        fp = f()
        x[idx] = old - EPS
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * EPS)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def neighbourhood_oracle(X, A_D, W, mode):
    """Loop form: average of the filter-weighted rows over the in- or out-neighbourhood."""
    M = len(X)
    out = np.zeros((M, 1))
    for m in range(M):
        weights = [(A_D[j, m] if mode == "in" else A_D[m, j]) for j in range(M)]
        total = sum(weights)
        if total == 0:
            continue
        acc = 0.0
        for j in range(M):
            if weights[j]:
                acc += weights[j] * float(np.dot(X[j], W[j]))
        out[m, 0] = max(acc / total, 0.0)
    return out


def random_backtrackless(rng, M, p=0.4):
    B = rng.random((M, M)) * (rng.random((M, M)) < p)
    return backtracklessize(B + B.T + np.eye(M))


# ---------------------------------------------------------------- graph convolution


def test_graph_conv_examples():
    X = np.array([[1.0], [2.0]])
    A_D = np.array([[1.0, 1.0], [0.0, 1.0]])
    W = np.ones((2, 1))
    assert np.allclose(graph_conv_in(X, A_D, W).ravel(), [1.0, 1.5])
    assert np.allclose(graph_conv_out(X, A_D, W).ravel(), [1.5, 2.0])
    assert np.array_equal(graph_conv_in(X, A_D, np.zeros((2, 1))), np.zeros((2, 1)))


def test_graph_conv_identity_adjacency(rng):
    X, W = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    y = (X * W).sum(axis=1, keepdims=True)
    assert np.allclose(graph_conv_in(X, np.eye(5), W), np.maximum(y, 0))
    assert np.allclose(graph_conv_out(X, np.eye(5), W), np.maximum(y, 0))


def test_graph_conv_symmetric_in_equals_out(rng):
    for _ in range(10):
        B = rng.random((6, 6))
        A = B + B.T
        X, W = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        assert np.allclose(graph_conv_in(X, A, W), graph_conv_out(X, A, W), atol=1e-12)


def test_graph_conv_matches_neighbourhood_loop(rng):
    for _ in range(25):
        M, c = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        A_D = random_backtrackless(rng, M)
        A_D[rng.integers(0, M)] = 0.0  # a vertex with no out-edges
        X, W = rng.normal(size=(M, c)), rng.normal(size=(M, c))
        assert np.allclose(graph_conv_in(X, A_D, W), neighbourhood_oracle(X, A_D, W, "in"), atol=1e-12)
        assert np.allclose(graph_conv_out(X, A_D, W), neighbourhood_oracle(X, A_D, W, "out"), atol=1e-12)


def test_graph_conv_shape_mismatch():
    with pytest.raises(ValueError):
        graph_conv_in(np.ones((3, 2)), np.eye(3), np.ones((4, 2)))
    with pytest.raises(ValueError):
        propagation_matrix(np.eye(2), "sideways")


def test_layer_equals_filter_loop(rng):
    M, Hp, H = 6, 3, 4
    A_D = random_backtrackless(rng, M)
    Z = rng.normal(size=(M, Hp))
    filters = rng.normal(size=(H, M, Hp))
    for mode, single in (("in", graph_conv_in), ("out", graph_conv_out)):
        batched = graph_conv_layer(Z, A_D, filters, mode)
        looped = np.hstack([single(Z, A_D, f) for f in filters])
        assert np.allclose(batched, looped, atol=1e-12)


def test_dgcnn_row_decomposition(rng):
    """On an undirected graph each output channel of the baseline equals a
    convolution whose filter rows all repeat one weight column."""
    g = random_graph(rng, 7, p=0.4)
    At = add_self_loops(g)
    X, W = rng.normal(size=(7, 3)), rng.normal(size=(3, 2))
    base = dgcnn_conv(X, At, W)
    for h in range(2):
        tiled = np.tile(W[:, h], (7, 1))
        assert np.allclose(graph_conv_in(X, At, tiled).ravel(), base[:, h], atol=1e-12)


def test_weighted_average_bound(rng):
    for _ in range(20):
        M = 7
        A_D = random_backtrackless(rng, M)
        X, W = rng.normal(size=(M, 2)), rng.normal(size=(M, 2))
        y = (X * W).sum(axis=1)
        out = graph_conv_out(X, A_D, W).ravel()
        for m in range(M):
            nb = np.flatnonzero(A_D[m])
            if len(nb) == 0:
                assert out[m] == 0.0
            else:
                assert out[m] <= max(y[nb].max(), 0.0) + 1e-12
                assert out[m] >= max(y[nb].min(), 0.0) - 1e-12


def test_row_normalize_zero_rows():
    A = np.array([[0.0, 0.0], [1.0, 3.0]])
    assert np.array_equal(row_normalize(A), [[0.0, 0.0], [0.25, 0.75]])


# ---------------------------------------------------------------- CNN pieces


def test_conv1d_examples():
    x = np.arange(4.0).reshape(1, 4, 1)
    ident = np.zeros((5, 1, 1))
    ident[2] = 1.0
    out, _ = conv1d_forward(x, ident, np.zeros(1))
    assert np.array_equal(out, x)
    box, _ = conv1d_forward(np.ones((1, 4, 1)), np.ones((3, 1, 1)), np.zeros(1))
    assert box.ravel().tolist() == [2.0, 3.0, 3.0, 2.0]
    with pytest.raises(ValueError):
        conv1d_forward(x, np.ones((4, 1, 1)), np.zeros(1))


def test_avgpool_examples():
    out, _ = avgpool_forward(np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 4, 1))
    assert out.ravel().tolist() == [2.0, 6.0]
    odd, _ = avgpool_forward(np.arange(5.0).reshape(1, 5, 1))
    assert odd.ravel().tolist() == [0.5, 2.5]


def test_softmax_examples():
    assert np.allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    p = softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)
    loss, _, _ = softmax_cross_entropy(np.zeros((1, 2)), [1])
    assert loss == pytest.approx(np.log(2))


def test_dropout_inverted(rng):
    x = np.ones((2000, 5))
    y, mask = dropout_forward(x, 0.5, rng, training=True)
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    same, m2 = dropout_forward(x, 0.5, rng, training=False)
    assert same is x and m2 is None
    assert np.array_equal(dropout_backward(np.ones_like(x), mask), mask)


# ---------------------------------------------------------------- gradient checks


def test_grad_graph_conv(rng):
    B, M, C, H = 2, 5, 3, 4
    X = rng.normal(size=(B, M, C))
    W = rng.normal(size=(H, M, C))
    N = np.stack([propagation_matrix(random_backtrackless(rng, M), "in") for _ in range(B)])
    R = rng.normal(size=(B, M, H))

    def f():
        return float((graph_conv_forward(X, N, W)[0] * R).sum())

    _, cache = graph_conv_forward(X, N, W)
    dX, dW = graph_conv_backward(R, cache)
    assert rel_err(dX, numeric_grad(f, X)) < RTOL
    assert rel_err(dW, numeric_grad(f, W)) < RTOL


def test_grad_conv1d(rng):
    x, w, b = rng.normal(size=(2, 7, 3)), rng.normal(size=(5, 3, 4)), rng.normal(size=4)
    R = rng.normal(size=(2, 7, 4))

    def f():
        return float((conv1d_forward(x, w, b)[0] * R).sum())

    dx, dw, db = conv1d_backward(R, conv1d_forward(x, w, b)[1])
    for analytic, arr in ((dx, x), (dw, w), (db, b)):
        assert rel_err(analytic, numeric_grad(f, arr)) < RTOL


def test_grad_avgpool_fc_softmax(rng):
    x = rng.normal(size=(3, 7, 2))
    R = rng.normal(size=(3, 3, 2))

    def f_pool():
        return float((avgpool_forward(x)[0] * R).sum())

    assert rel_err(avgpool_backward(R, avgpool_forward(x)[1]), numeric_grad(f_pool, x)) < RTOL

    h, w, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    labels = np.array([0, 2, 1, 2])

    def f_fc():
        return softmax_cross_entropy(fc_forward(h, w, b)[0], labels)[0]

    logits, cache = fc_forward(h, w, b)
    _, _, dlog = softmax_cross_entropy(logits, labels)
    dh, dw, db = fc_backward(dlog, cache)
    for analytic, arr in ((dh, h), (dw, w), (db, b)):
        assert rel_err(analytic, numeric_grad(f_fc, arr)) < RTOL


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop():
    p = Param(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = Param(np.array([0.0, 0.0, 0.0]))
    opt = Adam([p], lr=1e-3)
    adam_step([p], [np.array([5.0, -1e-2, 300.0])], opt)
    assert np.allclose(p.value, [-1e-3, 1e-3, -1e-3], rtol=1e-5)


def test_adam_quadratic_bowl():
    p = Param(np.array([10.0, -4.0]))
    opt = Adam([p], lr=0.05)
    target = np.array([3.0, 1.0])
    for _ in range(3000):
        p.grad[...] = 2 * (p.value - target)
        opt.step()
    assert np.allclose(p.value, target, atol=1e-3)


def test_adam_state_round_trip():
    p = Param(np.ones(3))
    opt = Adam([p], lr=0.01)
    p.grad[...] = [1.0, 2.0, 3.0]
    opt.step()
    q = Param(p.value.copy())
    opt2 = Adam([q], lr=0.01)
    opt2.load_state_arrays(opt.state_arrays())
    p.grad[...] = q.grad[...] = [0.5, -1.0, 2.0]
    opt.step()
    opt2.step()
    assert np.array_equal(p.value, q.value)
