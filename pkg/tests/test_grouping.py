import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_ncut, ncut_brute, planted_graph, random_graph, same_partition
from tailscape import grouping
from tailscape.grouping import MemoryBank, update_bank


def bank_from(snaps):
    snaps = np.asarray(snaps, dtype=float)
    bank = MemoryBank(len(snaps), snaps.shape[1])
    bank.snapshots[:] = snaps
    bank.best_q[:] = 0.0
    bank.populated[:] = True
    return bank


def test_bank_keeps_argmax_epoch():
    bank = MemoryBank(1, 2)
    for epoch, q in enumerate([0.2, 0.5, 0.3]):
        update_bank(bank, np.array([epoch, epoch], float), [q], epoch)
    assert bank.epoch_found[0] == 1 and bank.best_q[0] == 0.5
    assert np.array_equal(bank.snapshots[0], [1.0, 1.0])


def test_tie_keeps_old_snapshot():
    bank = MemoryBank(1, 1)
    update_bank(bank, np.array([1.0]), [0.4], 0)
    update_bank(bank, np.array([2.0]), [0.4], 1)
    assert bank.snapshots[0, 0] == 1.0 and bank.epoch_found[0] == 0


def test_first_snapshot_always_adopted():
    bank = MemoryBank(2, 1)
    assert not bank.full
    update_bank(bank, np.array([3.0]), [-1e9, 5.0], 0)
    assert bank.full and np.all(bank.snapshots == 3.0)


def test_bank_rejects_nonfinite_q():
    with pytest.raises(ValueError):
        update_bank(MemoryBank(2, 1), np.zeros(1), [0.0, np.nan], 0)


def test_replay_against_argmax_scan():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((50, 10))
    bank = MemoryBank(10, 1)
    for e in range(50):
        update_bank(bank, np.array([float(e)]), Q[e], e)
        assert np.all(bank.best_q == Q[: e + 1].max(axis=0))
    for c in range(10):
        first_max = int(np.argmax(Q[:, c]))
        assert bank.epoch_found[c] == first_max
        assert bank.snapshots[c, 0] == first_max


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_bank_monotone(seed):
    rng = np.random.default_rng(seed)
    bank = MemoryBank(4, 2)
    prev = bank.best_q.copy()
    for e in range(10):
        update_bank(bank, rng.standard_normal(2), rng.standard_normal(4), e)
        assert np.all(bank.best_q >= prev)
        prev = bank.best_q.copy()


def test_affinity_identical_snapshots_and_symmetry():
    bank = bank_from([[0, 0], [0, 0], [1, 2], [4, -1]])
    W = grouping.build_affinity(bank)
    assert W[0, 1] == 1.0
    assert np.array_equal(W, W.T) and np.all(np.diag(W) == 0)
    off = W[~np.eye(4, dtype=bool)]
    assert np.all((off > 0) & (off <= 1))


def test_affinity_hand_kernel():
    pts = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]])
    W = grouping.build_affinity(bank_from(pts))
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    sigma = np.median(d[np.triu_indices(4, 1)])
    assert W[0, 1] == pytest.approx(np.exp(-0.01 / (2 * sigma**2)), rel=1e-14)
    # the median bandwidth sits at the cross-pair scale: exp(-1/2) across, ~1 within
    assert W[0, 2] == pytest.approx(np.exp(-100 / (2 * sigma**2)), rel=1e-14)
    assert min(W[0, 1], W[2, 3]) > 0.999 and max(W[0, 2], W[0, 3], W[1, 2], W[1, 3]) < 0.62


def test_affinity_requires_full_bank():
    with pytest.raises(ValueError):
        grouping.build_affinity(MemoryBank(3, 2))


def test_affinity_projection_option():
    rng = np.random.default_rng(2)
    bank = bank_from(rng.standard_normal((5, 400)))
    W = grouping.build_affinity(bank, project_dim=256, seed=1)
    assert W.shape == (5, 5) and np.allclose(W, W.T)


def test_singleton_partition_when_g_equals_c():
    W = random_graph(5, 0)
    assert grouping.ncut_partition(W, 5).tolist() == [0, 1, 2, 3, 4]


def test_two_tight_pairs():
    W = grouping.build_affinity(bank_from([[0, 0], [0, 0], [10, 10], [10, 10]]))
    labels = grouping.ncut_partition(W, 2)
    best, best_lab = exhaustive_ncut(W)
    assert same_partition(labels, best_lab) and same_partition(labels, [0, 0, 1, 1])


@pytest.mark.parametrize("seed", range(10))
def test_block_diagonal_recovered(seed):
    W, blocks = planted_graph(8, seed, across=(0.0, 0.0))
    # exactly block-diagonal: disconnected components
    assert same_partition(grouping.ncut_partition(W, 2, seed=seed), blocks)


@pytest.mark.parametrize("seed", range(10))
def test_random_graph_not_worse_than_brute_value(seed):
    W = random_graph(7, seed)
    labels = grouping.ncut_partition(W, 2, seed=seed)
    assert grouping.ncut_value(W, labels) == pytest.approx(ncut_brute(W, labels), rel=1e-12)
    assert grouping.ncut_value(W, labels) >= exhaustive_ncut(W)[0] - 1e-12


def test_partition_errors_and_trivial_cases():
    W = random_graph(4, 1)
    with pytest.raises(ValueError):
        grouping.ncut_partition(W, 5)
    with pytest.raises(ValueError):
        grouping.ncut_partition(W, 0)
    assert grouping.ncut_partition(W, 1).tolist() == [0] * 4


def test_three_components_into_two_groups():
    W = np.zeros((5, 5))
    W[0, 1] = W[1, 0] = 1.0
    W[2, 3] = W[3, 2] = 1.0
    labels = grouping.ncut_partition(W, 2)
    assert len(set(labels.tolist())) == 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 9), G=st.integers(2, 3))
def test_partition_total_and_surjective(seed, n, G):
    G = min(G, n)
    labels = grouping.ncut_partition(random_graph(n, seed), G, seed=seed)
    assert len(labels) == n and set(labels.tolist()) == set(range(G))


def test_kmeans_separates_clusters():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(0, 0.1, (10, 2)), rng.normal(5, 0.1, (10, 2))])
    labels, centers, inertia = grouping.kmeans(X, 2, seed=0)
    assert same_partition(labels, [0] * 10 + [1] * 10) and inertia < 1.0


def test_group_optima_means_and_sizes():
    snaps = np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 1.0], [7.0, 7.0]])
    part = grouping.group_optima(bank_from(snaps), [0, 1, 0, 1], [10, 5, 3, 2])
    assert np.allclose(part.optima[0], [(1 + 5) / 2, (2 + 1) / 2], rtol=0, atol=1e-12)
    assert part.n_samples.tolist() == [13, 7] and part.n_classes.tolist() == [2, 2]
    assert part.sizes("classes").tolist() == [2, 2]
    with pytest.raises(ValueError):
        part.sizes("weird")


def test_group_optima_singleton_identical_and_three():
    snaps = np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 4.0], [0.5, -3.0], [9.0, 9.0]])
    part = grouping.group_optima(bank_from(snaps), [0, 0, 1, 1, 2], [5] * 5)
    assert np.array_equal(part.optima[0], snaps[0])
    assert np.array_equal(part.optima[2], snaps[4])
    part3 = grouping.group_optima(bank_from(snaps), [0, 0, 0, 1, 1], [5] * 5)
    hand = [(1.0 + 1.0 + 2.0) / 3, (1.0 + 1.0 + 4.0) / 3]
    assert np.allclose(part3.optima[0], hand, rtol=0, atol=1e-12)


def test_group_optima_empty_group_rejected():
    with pytest.raises(ValueError):
        grouping.group_optima(bank_from(np.eye(3)), [0, 2, 2], [1, 1, 1])


def test_group_optima_commutes_with_relabeling():
    rng = np.random.default_rng(4)
    bank = bank_from(rng.standard_normal((6, 3)))
    a = np.array([0, 1, 2, 0, 1, 2])
    perm = np.array([2, 0, 1])
    p1 = grouping.group_optima(bank, a, np.arange(1, 7))
    p2 = grouping.group_optima(bank, perm[a], np.arange(1, 7))
    for g in range(3):
        assert np.array_equal(p1.optima[g], p2.optima[perm[g]])
        assert p1.n_samples[g] == p2.n_samples[perm[g]]
