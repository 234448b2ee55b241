import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hclsm.structure import (CausalGraph, RelationGNN, anneal_temperature, augmented_lagrangian_step,
                             dag_penalty, edge_features, expm_taylor, gnn_messages, gumbel_edge_sample,
                             interaction_edge_weights, lagrangian_term, sparsity_loss, track_pair_buffers)
from hclsm.tensor.core import Tensor, backward, reset_tape
from hclsm.tensor.gradcheck import check_gradients


def dense_messages_oracle(slots, p, mod):
    """Straight per-pair loop over the edge MLP."""
    B, N, d = slots.shape
    out = np.zeros((B, N, d))
    for b in range(B):
        for i in range(N):
            acc = np.zeros(d)
            for j in range(N):
                if i == j:
                    continue
                f = edge_features(Tensor(slots[b, i]), Tensor(slots[b, j]))
                h = mod.l2(Tensor(_gelu(mod.l1(f).data))).data
                acc += h[:d] * (1.0 / (1.0 + math.exp(-h[d]))) * p[b, j]
            out[b, i] = acc / (sum(p[b, j] for j in range(N) if j != i) + 1e-6)
    return out


def _gelu(x):
    from hclsm.tensor import ops
    return ops.gelu(Tensor(x)).data


# ------------------------------------------------------------ edge features


def test_edge_features_equal_endpoints(rng):
    o = rng.normal(size=5)
    f = edge_features(Tensor(o), Tensor(o)).data
    assert np.all(f[10:15] == 0.0) and np.array_equal(f[15:], o * o)


def test_edge_features_zero_source(rng):
    o = rng.normal(size=4)
    f = edge_features(Tensor(o), Tensor(np.zeros(4))).data
    assert np.array_equal(f, np.concatenate([o, np.zeros(4), o, np.zeros(4)]))


def test_edge_features_width_and_mismatch(rng):
    assert edge_features(Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 3, 6)))).shape[-1] == 24
    with pytest.raises(ValueError):
        edge_features(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ------------------------------------------------------------ GNN messages


def test_single_slot_receives_zero_message(rng):
    mod = RelationGNN(4, rng)
    assert np.all(gnn_messages(Tensor(rng.normal(size=(2, 1, 4))), np.ones((2, 1)), mod).data == 0.0)


def test_dense_path_matches_loop_oracle(rng):
    mod = RelationGNN(3, rng, hidden=5)
    slots, p = rng.normal(size=(2, 4, 3)), rng.uniform(0, 1, (2, 4))
    got = gnn_messages(Tensor(slots), p, mod, chunked=False).data
    assert np.allclose(got, dense_messages_oracle(slots, p, mod), atol=1e-13)


@pytest.mark.parametrize("N", [8, 33, 48])
def test_chunked_equals_dense(rng, N):
    mod = RelationGNN(6, rng, hidden=8)
    slots, p = Tensor(rng.normal(size=(2, N, 6))), rng.uniform(0, 1, (2, N))
    dense = gnn_messages(slots, p, mod, chunked=False).data
    chunked = gnn_messages(slots, p, mod, chunk=16, chunked=True).data
    assert np.abs(chunked - dense).max() <= 1e-12


def test_chunked_gradients_equal_dense(rng):
    mod = RelationGNN(4, rng, hidden=6)
    slots_np, p_np = rng.normal(size=(2, 48, 4)), rng.uniform(0, 1, (2, 48))
    grads = []
    for chunked in (False, True):
        reset_tape()
        for q in mod.parameters():
            q.grad = None
        s = Tensor(slots_np, requires_grad=True)
        p = Tensor(p_np, requires_grad=True)
        out = gnn_messages(s, p, mod, chunk=16, chunked=chunked)
        backward((out * out).sum())
        grads.append([s.grad, p.grad] + [q.grad.copy() for q in mod.parameters()])
    for a, b in zip(*grads):
        assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(b).max())


def test_chunked_peak_pair_memory_bounded(rng):
    N, chunk = 48, 16
    mod = RelationGNN(4, rng, hidden=6)
    slots_np, p = rng.normal(size=(2, N, 4)), rng.uniform(0, 1, (2, N))
    peaks = {}
    for chunked in (False, True):
        reset_tape()
        s = Tensor(slots_np, requires_grad=True)
        with track_pair_buffers() as stats:
            backward(gnn_messages(s, p, mod, chunk=chunk, chunked=chunked).sum())
        peaks[chunked] = stats.peak
    assert peaks[True] <= chunk / N * peaks[False]


def test_auto_chunking_above_32(rng):
    mod = RelationGNN(2, rng, hidden=3)
    with track_pair_buffers() as stats:
        gnn_messages(Tensor(rng.normal(size=(1, 40, 2))), np.ones((1, 40)), mod)
    assert stats.blocks == 3


def test_dead_source_contributes_nothing(rng):
    mod = RelationGNN(3, rng)
    slots = rng.normal(size=(1, 4, 3))
    p = np.array([[1.0, 0.0, 1.0, 1.0]])
    a = gnn_messages(Tensor(slots), p, mod).data
    slots[0, 1] += 10.0
    b = gnn_messages(Tensor(slots), p, mod).data
    assert np.allclose(a[0, [0, 2, 3]], b[0, [0, 2, 3]], atol=1e-14)


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_gnn_slot_permutation_equivariant(seed):
    r = np.random.default_rng(seed)
    mod = RelationGNN(3, r, hidden=4)
    slots, p = r.normal(size=(1, 6, 3)), r.uniform(0, 1, (1, 6))
    perm = r.permutation(6)
    a = gnn_messages(Tensor(slots), p, mod).data
    b = gnn_messages(Tensor(slots[:, perm]), p[:, perm], mod).data
    assert np.allclose(a[:, perm], b, atol=1e-13)


def test_gnn_gradchecks(rng):
    for chunked in (False, True):
        mod = RelationGNN(3, rng, hidden=4)

        def f(slots, p, w):
            mod.l1.weight = w
            return gnn_messages(slots, p, mod, chunk=2, chunked=chunked)

        inputs = [rng.normal(size=(1, 5, 3)), rng.uniform(0.1, 0.9, (1, 5)), mod.l1.weight.data.copy()]
        assert check_gradients(f, inputs) <= 1e-4


# ------------------------------------------------------------ edge weights


def test_edge_weights_diagonal_zero_and_range(rng):
    w = interaction_edge_weights(Tensor(rng.normal(size=(2, 5, 3))), RelationGNN(3, rng))
    assert np.all(np.diagonal(w, axis1=1, axis2=2) == 0.0)
    off = w[:, ~np.eye(5, dtype=bool)]
    assert np.all((off > 0) & (off < 1))


def test_symmetric_init_gives_symmetric_weights(rng):
    d = 3
    mod = RelationGNN(d, rng, hidden=5)
    W = mod.l1.weight.data
    # tie the o_i and o_j blocks and zero the antisymmetric difference block
    rows = W.shape[0] == 4 * d
    blk = (lambda k: W[k * d:(k + 1) * d]) if rows else (lambda k: W[:, k * d:(k + 1) * d])
    blk(1)[...] = blk(0)
    blk(2)[...] = 0.0
    w = interaction_edge_weights(Tensor(rng.normal(size=(1, 4, d))), mod)
    assert np.allclose(w[0], w[0].T, atol=1e-14)


# ------------------------------------------------------------ Gumbel sampling


def test_high_temperature_samples_half(rng):
    g = CausalGraph(Tensor(rng.normal(scale=3.0, size=(4, 4))), temperature=1e9)
    A = gumbel_edge_sample(g, 0).data
    off = A[~np.eye(4, dtype=bool)]
    assert np.allclose(off, 0.5, atol=1e-6) and np.all(np.diag(A) == 0.0)


def test_confident_logit_low_temperature_monte_carlo():
    n = 101  # 10100 off-diagonal draws
    g = CausalGraph(Tensor(np.full((n, n), 10.0)), temperature=0.1)
    A = gumbel_edge_sample(g, 3).data
    frac = (A[~np.eye(n, dtype=bool)] > 0.99).mean()
    assert frac > 0.99


@pytest.mark.parametrize("logit", [-1.5, 0.0, 0.7])
def test_hard_sample_mean_matches_sigmoid(logit):
    n = 317  # about 10^5 off-diagonal draws
    g = CausalGraph(Tensor(np.full((n, n), logit)), temperature=0.5)
    A = gumbel_edge_sample(g, 11, hard=True).data
    draws = A[~np.eye(n, dtype=bool)]
    assert set(np.unique(draws)) <= {0.0, 1.0}
    p = 1.0 / (1.0 + math.exp(-logit))
    se = math.sqrt(p * (1 - p) / draws.size)
    assert abs(draws.mean() - p) <= 3 * se
    assert np.all(np.diag(A) == 0.0)


def test_gumbel_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        gumbel_edge_sample(CausalGraph(Tensor(np.zeros((2, 2))), temperature=0.0), 0)


def test_gumbel_same_seed_same_sample(rng):
    g = CausalGraph(Tensor(rng.normal(size=(5, 5))), temperature=0.3)
    assert np.array_equal(gumbel_edge_sample(g, 42).data, gumbel_edge_sample(g, 42).data)


# ------------------------------------------------------------ DAG penalty


def test_dag_penalty_zero_matrix():
    assert dag_penalty(Tensor(np.zeros((5, 5)))).item() == 0.0


def test_dag_penalty_upper_triangular(rng):
    A = np.triu(rng.uniform(-2, 2, (6, 6)), k=1)
    assert abs(dag_penalty(Tensor(A)).item()) <= 1e-12


def test_dag_penalty_two_cycle_closed_form():
    h = dag_penalty(Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))).item()
    assert h == pytest.approx(2 * math.cosh(1.0) - 2, abs=1e-13)
    assert h == pytest.approx(1.0861612, abs=1e-7)


def test_expm_matches_eigendecomposition(rng):
    S = rng.normal(size=(5, 5))
    S = S + S.T
    w, V = np.linalg.eigh(S)
    ref = V @ np.diag(np.exp(w)) @ V.T
    got = expm_taylor(Tensor(S)).data
    assert np.abs(got - ref).max() <= 1e-11 * np.abs(ref).max()


@given(st.integers(0, 2**31), st.integers(2, 7))
def test_dag_penalty_zero_on_permuted_triangular(seed, n):
    r = np.random.default_rng(seed)
    perm = np.eye(n)[r.permutation(n)]
    A = perm @ np.triu(r.uniform(-2, 2, (n, n)), k=1) @ perm.T
    assert abs(dag_penalty(Tensor(A)).item()) <= 1e-10


@given(st.integers(0, 2**31), st.integers(2, 7))
def test_dag_penalty_positive_with_cycle(seed, n):
    r = np.random.default_rng(seed)
    A = r.uniform(-1.5, 1.5, (n, n))
    h = dag_penalty(Tensor(A)).item()
    assert h >= 0.0
    # any nonzero diagonal or two-cycle makes A*A non-nilpotent
    assert h > 1e-10


def test_dag_penalty_gradcheck(rng):
    assert check_gradients(dag_penalty, [rng.uniform(-1.5, 1.5, (4, 4))]) <= 1e-6


# ------------------------------------------------------------ sparsity and Lagrangian


def test_sparsity_examples(rng):
    assert sparsity_loss(Tensor(np.zeros((4, 4)))).item() == 0.0
    assert sparsity_loss(Tensor(1.0 - np.eye(4))).item() == pytest.approx(1.0)
    reset_tape()
    A = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    backward(sparsity_loss(A))
    off = ~np.eye(4, dtype=bool)
    assert np.array_equal(np.sign(A.grad[off]), np.sign(A.data[off]))
    assert np.all(A.grad[~off] == 0.0)


def test_lagrangian_zero_h():
    g = CausalGraph(Tensor(np.zeros((2, 2))), lagrange_lambda=0.7)
    assert lagrangian_term(g, Tensor(np.array(0.0))).item() == 0.0
    augmented_lagrangian_step(g, 0.0)
    assert g.lagrange_lambda == 0.7


def test_lagrangian_formula_values():
    g = CausalGraph(Tensor(np.zeros((2, 2))), lagrange_lambda=0.0, penalty_rho=1.0)
    assert lagrangian_term(g, Tensor(np.array(1.0))).item() == pytest.approx(0.5)
    augmented_lagrangian_step(g, 1.0)
    assert g.lagrange_lambda == 1.0


def test_rho_grows_only_when_h_stagnates():
    g = CausalGraph(Tensor(np.zeros((2, 2))))
    trace = []
    for h in [1.0, 0.2, 0.1, 0.02, 0.019, 0.001]:
        augmented_lagrangian_step(g, h)
        trace.append(g.penalty_rho)
    # first call has no history, 0.2 <= 0.25*1, 0.1 > 0.25*0.2, 0.02 <= 0.025, 0.019 > 0.005, 0.001 <= 0.00475
    assert trace == [1.0, 1.0, 10.0, 10.0, 100.0, 100.0]


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30))
def test_lambda_and_rho_nondecreasing(hs):
    g = CausalGraph(Tensor(np.zeros((2, 2))))
    lam, rho = g.lagrange_lambda, g.penalty_rho
    for h in hs:
        augmented_lagrangian_step(g, h)
        assert g.lagrange_lambda >= lam and g.penalty_rho >= rho
        lam, rho = g.lagrange_lambda, g.penalty_rho


def test_anneal_endpoints():
    assert anneal_temperature(0.0) == 1.0
    assert anneal_temperature(1.0) == pytest.approx(0.1)
    assert anneal_temperature(0.5) == pytest.approx(0.55)
    assert anneal_temperature(2.0) == pytest.approx(0.1)
