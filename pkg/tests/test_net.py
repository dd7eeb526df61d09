import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import fd_grad
from tailscape.net import (MLP, Architecture, load_checkpoint, load_vectors, save_checkpoint,
                           save_vectors)


def rel_err(a, b, floor=1e-4):
    # central differences carry ~1e-11 absolute roundoff, so tiny coordinates
    # are compared against a 1e-4 floor instead of their own magnitude
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_problem(seed, n=None):
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(1, 3))))
    net = MLP(Architecture(int(rng.integers(1, 4)), hidden, int(rng.integers(2, 5))))
    theta = rng.standard_normal(net.d)
    n = n or int(rng.integers(1, 9))
    X = rng.standard_normal((n, net.arch.input_dim))
    y = rng.integers(0, net.arch.num_classes, n)
    return net, theta, X, y


def test_layout_and_encoder_boundary():
    net = MLP(Architecture(2, (3, 4), 5))
    assert net.d == 2 * 3 + 3 + 3 * 4 + 4 + 4 * 5 + 5
    assert net.n_enc == 2 * 3 + 3 + 3 * 4 + 4
    assert net.blocks()[0] == (0, 6) and net.blocks()[-1] == (net.d - 5, net.d)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(2, (), 3)
    with pytest.raises(ValueError):
        Architecture(2, (0,), 3)


def test_zero_params_give_zero_logits():
    net = MLP(Architecture(3, (4,), 5))
    _, logits = net.forward(np.zeros(net.d), np.array([1.0, -2.0, 3.0]))
    assert np.all(logits == 0)


def test_hand_evaluated_forward():
    net = MLP(Architecture(2, (2,), 2))
    W1, b1 = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.5, -0.5])
    W2, b2 = np.array([[2.0, 0.0], [1.0, -1.0]]), np.array([0.1, 0.2])
    theta = net.flatten([(W1, b1), (W2, b2)])
    x = np.array([0.3, 0.7])
    h = np.tanh([0.3 + 0.5, 0.7 - 0.5])
    feats, logits = net.forward(theta, x)
    assert np.allclose(feats, h, rtol=0, atol=1e-15)
    assert np.allclose(logits, [2 * h[0] + 0.1, h[0] - h[1] + 0.2], rtol=0, atol=1e-15)


def test_forward_deterministic_and_checks_dims():
    net, theta, X, _ = random_problem(0, n=5)
    a = net.forward(theta, X)[1]
    assert a.tobytes() == net.forward(theta, X)[1].tobytes()
    with pytest.raises(ValueError):
        net.forward(theta, np.zeros((2, net.arch.input_dim + 1)))
    with pytest.raises(ValueError):
        net.forward(theta[:-1], X)


def test_equal_logits_give_ln2():
    net = MLP(Architecture(2, (3,), 2))
    loss, _ = net.loss_and_grad(np.zeros(net.d), np.ones((4, 2)), np.array([0, 1, 1, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_small_net_gradient_check():
    rng = np.random.default_rng(1)
    net = MLP(Architecture(2, (3,), 2))
    theta = rng.standard_normal(net.d)
    X, y = rng.standard_normal((6, 2)), rng.integers(0, 2, 6)
    g = net.loss_and_grad(theta, X, y)[1]
    fd = fd_grad(lambda t: net.loss_and_grad(t, X, y)[0], theta)
    assert rel_err(g, fd).max() <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_weighted_gradient_check(seed):
    net, theta, X, y = random_problem(seed + 100)
    w = np.random.default_rng(seed).uniform(0.1, 2.0, len(y))
    g = net.loss_and_grad(theta, X, y, w)[1]
    fd = fd_grad(lambda t: net.loss_and_grad(t, X, y, w)[0], theta)
    assert rel_err(g, fd).max() <= 1e-6


def test_duplicating_batch_is_invariant():
    net, theta, X, y = random_problem(3, n=5)
    l1, g1 = net.loss_and_grad(theta, X, y)
    l2, g2 = net.loss_and_grad(theta, np.vstack([X, X]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    assert np.allclose(g1, g2, rtol=1e-13, atol=1e-16)


def test_bad_batches_rejected():
    net, theta, X, y = random_problem(4, n=3)
    with pytest.raises(ValueError):
        net.loss_and_grad(theta, X[:0], y[:0])
    with pytest.raises(ValueError):
        net.loss_and_grad(theta, X, y, np.zeros(3))
    with pytest.raises(ValueError):
        net.loss_and_grad(theta, X, y, np.array([1.0, -1.0, 1.0]))


def test_per_sample_grads_match_single_sample_calls():
    net, theta, X, y = random_problem(5, n=6)
    P = net.per_sample_grads(theta, X, y)
    for i in range(len(y)):
        assert np.allclose(P[i], net.loss_and_grad(theta, X[i:i + 1], y[i:i + 1])[1],
                           rtol=1e-12, atol=1e-15)
    assert np.allclose(P.mean(axis=0), net.loss_and_grad(theta, X, y)[1], rtol=1e-12, atol=1e-15)


def test_single_class_batch_class_grad_is_batch_grad():
    net, theta, X, _ = random_problem(6, n=4)
    y = np.zeros(4, dtype=int)
    cg = net.per_class_grads(theta, X, y)
    assert list(cg) == [0]
    assert np.array_equal(cg[0], net.loss_and_grad(theta, X, y)[1])


def test_two_equal_classes_mean_of_grads():
    net = MLP(Architecture(2, (3,), 3))
    rng = np.random.default_rng(7)
    theta, X = rng.standard_normal(net.d), rng.standard_normal((6, 2))
    y = np.array([0, 2, 0, 2, 0, 2])
    cg = net.per_class_grads(theta, X, y)
    assert np.allclose((cg[0] + cg[2]) / 2, net.loss_and_grad(theta, X, y)[1], rtol=1e-12, atol=1e-16)


def test_counts_421_reconstruction():
    net = MLP(Architecture(2, (4,), 3))
    rng = np.random.default_rng(8)
    theta, X = rng.standard_normal(net.d), rng.standard_normal((7, 2))
    y = np.array([0, 0, 0, 0, 1, 1, 2])
    cg = net.per_class_grads(theta, X, y)
    direct = sum(int(np.sum(y == c)) / 7 * g for c, g in cg.items())
    batch = net.loss_and_grad(theta, X, y)[1]
    assert np.linalg.norm(direct - batch) <= 1e-12 * np.linalg.norm(batch)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_reconstruction_property(seed):
    net, theta, X, y = random_problem(seed, n=12)
    cg = net.per_class_grads(theta, X, y)
    direct = sum(int(np.sum(y == c)) / len(y) * g for c, g in cg.items())
    batch = net.loss_and_grad(theta, X, y)[1]
    assert np.linalg.norm(direct - batch) <= 1e-12 * max(np.linalg.norm(batch), 1e-300)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_flatten_round_trip(seed):
    net, theta, _, _ = random_problem(seed)
    assert np.array_equal(net.flatten(net.unflatten(theta)), theta)


def test_init_is_seeded_and_bounded():
    net = MLP(Architecture(2, (32, 32), 10))
    a, b = net.init_params(0), net.init_params(0)
    assert np.array_equal(a, b) and not np.array_equal(a, net.init_params(1))
    for (out, inp), (w0, w1, b1) in zip(net.shapes, net.slices):
        assert np.all(np.abs(a[w0:w1]) <= math.sqrt(6 / (out + inp)))
        assert np.all(a[w1:b1] == 0)


def test_checkpoint_round_trip(tmp_path):
    net, theta, _, _ = random_problem(9)
    save_checkpoint(tmp_path / "m.bin", net, theta)
    net2, theta2 = load_checkpoint(tmp_path / "m.bin")
    assert net2.arch == net.arch and theta2.tobytes() == theta.tobytes()
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"TSCP"
    assert raw[-8 * net.d:] == theta.astype("<f8").tobytes()


def test_multi_vector_file_and_bad_magic(tmp_path):
    net = MLP(Architecture(2, (3,), 2))
    vecs = [np.arange(5.0), np.ones(5)]
    save_vectors(tmp_path / "v.bin", net.arch, vecs)
    arch, back = load_vectors(tmp_path / "v.bin")
    assert arch == net.arch and all(np.array_equal(a, b) for a, b in zip(vecs, back))
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        load_vectors(tmp_path / "bad.bin")
    with pytest.raises(ValueError):
        save_vectors(tmp_path / "u.bin", net.arch, [np.ones(2), np.ones(3)])
