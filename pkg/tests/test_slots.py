import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hclsm.slots import (BIRTH_P_ALIVE, BirthProjection, ExistenceHead, SlotAttention, SlotInit, SlotState,
                         alive_mask, attention_weights, existence_head, hard_assignment, init_slots,
                         residual_energy, sinkhorn_from_cost, sinkhorn_match, slot_attention_iterate,
                         slot_birth)
from hclsm.tensor import ops
from hclsm.tensor.core import Tensor, backward
from hclsm.tensor.gradcheck import check_gradients


# ------------------------------------------------------------ init


def test_zero_sigma_gives_mu(rng):
    init = SlotInit(6, rng)
    init.log_sigma.data[:] = -np.inf
    out = init_slots(init, 2, 4, np.random.default_rng(0)).data
    assert np.array_equal(out, np.broadcast_to(init.mu.data, (2, 4, 6)))


def test_same_seed_same_draw(rng):
    init = SlotInit(6, rng)
    a = init_slots(init, 2, 4, np.random.default_rng(5)).data
    b = init_slots(init, 2, 4, np.random.default_rng(5)).data
    assert np.array_equal(a, b)


def test_sample_mean_monte_carlo(rng):
    init = SlotInit(4, rng)
    draws = init_slots(init, 10_000, 1, np.random.default_rng(9)).data.reshape(-1, 4)
    sigma = np.exp(init.log_sigma.data)
    assert np.all(np.abs(draws.mean(0) - init.mu.data) <= 3 * sigma / 100)


def test_reparameterised_gradient_reaches_mu_and_sigma(rng):
    init = SlotInit(3, rng)
    out = init_slots(init, 2, 2, np.random.default_rng(0))
    backward(ops.sum(out))
    assert np.allclose(init.mu.grad, 4.0)
    assert init.log_sigma.grad is not None


# ------------------------------------------------------------ competition


def test_single_slot_takes_every_token(rng):
    A = attention_weights(Tensor(rng.normal(size=(2, 1, 4))), Tensor(rng.normal(size=(2, 5, 4)))).data
    assert np.array_equal(A, np.ones((2, 1, 5)))


def test_identical_queries_split_evenly(rng):
    q = np.repeat(rng.normal(size=(1, 1, 4)), 2, axis=1)
    A = attention_weights(Tensor(q), Tensor(rng.normal(size=(1, 5, 4)))).data
    assert np.allclose(A, 0.5, atol=1e-15)


def test_columns_sum_to_one(rng):
    A = attention_weights(Tensor(rng.normal(size=(1, 3, 4))), Tensor(rng.normal(size=(1, 5, 4)))).data
    assert np.abs(A.sum(axis=1) - 1).max() <= 1e-12


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 9))
def test_columns_sum_to_one_property(seed, N, M):
    r = np.random.default_rng(seed)
    scale = r.uniform(0.1, 20)
    A = attention_weights(Tensor(r.normal(size=(2, N, 5)) * scale), Tensor(r.normal(size=(2, M, 5)) * scale)).data
    assert np.abs(A.sum(axis=1) - 1).max() <= 1e-12


# ------------------------------------------------------------ iteration


def _frozen_module(rng, d=4):
    mod = SlotAttention(d, d, rng, iters=1)
    mod.gru.b_x.data[d:2 * d] = -60.0  # update gate closed
    mod.mlp.fc2.weight.data[:] = 0.0
    mod.mlp.fc2.bias.data[:] = 0.0
    return mod


def test_closed_gate_leaves_slots_unchanged(rng):
    mod = _frozen_module(rng)
    slots = rng.normal(size=(2, 3, 4))
    out, _ = mod(Tensor(slots), Tensor(rng.normal(size=(2, 6, 4))), iters=1)
    assert np.allclose(out.data, slots, atol=1e-12)


def test_duplicated_tokens_give_same_result(rng):
    mod = SlotAttention(4, 4, rng)
    slots, tokens = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 5, 4))
    a, _ = mod(Tensor(slots), Tensor(tokens))
    b, _ = mod(Tensor(slots), Tensor(np.concatenate([tokens, tokens], axis=1)))
    assert np.allclose(a.data, b.data, atol=1e-7)  # epsilon guard on the weighted mean scales with token count


@given(st.integers(0, 2**31))
def test_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    mod = SlotAttention(4, 4, np.random.default_rng(seed + 1))
    slots, tokens = r.normal(size=(2, 5, 4)), r.normal(size=(2, 7, 4))
    perm = r.permutation(5)
    a, Aa = mod(Tensor(slots), Tensor(tokens))
    b, Ab = mod(Tensor(slots[:, perm]), Tensor(tokens))
    assert np.abs(a.data[:, perm] - b.data).max() <= 1e-12
    assert np.abs(Aa.data[:, perm] - Ab.data).max() <= 1e-12


def test_iterations_must_be_positive(rng):
    mod = SlotAttention(4, 4, rng)
    k, v = mod.project_tokens(Tensor(rng.normal(size=(1, 3, 4))))
    with pytest.raises(ValueError):
        slot_attention_iterate(mod, Tensor(rng.normal(size=(1, 2, 4))), k, v, 0)


def test_slots_clamped(rng):
    mod = SlotAttention(4, 4, rng)
    mod.mlp.fc2.bias.data[:] = 1e6
    out, _ = mod(Tensor(rng.normal(size=(1, 2, 4))), Tensor(rng.normal(size=(1, 3, 4))))
    assert np.all(np.abs(out.data) <= 50)


def test_slot_module_gradcheck_tiny(rng):
    d, N, M = 4, 3, 8
    mod = SlotAttention(d, d, rng, mlp_hidden=4)

    def f(slots, tokens, wq, wk):
        mod.to_q.weight, mod.to_k.weight = wq, wk
        out, _ = mod(slots, tokens, iters=2)
        return out

    inputs = [rng.normal(size=(1, N, d)), rng.normal(size=(1, M, d)), mod.to_q.weight.data.copy(),
              mod.to_k.weight.data.copy()]
    assert check_gradients(f, inputs) <= 1e-4


# ------------------------------------------------------------ existence and birth


def test_existence_zero_head_is_half(rng):
    head = ExistenceHead(4, rng)
    head.proj.weight.data[:] = 0
    head.proj.bias.data[:] = 0
    assert np.array_equal(existence_head(Tensor(rng.normal(size=(2, 3, 4))), head).data, np.full((2, 3), 0.5))


def test_existence_large_bias_saturates(rng):
    head = ExistenceHead(4, rng, bias_init=10.0)
    head.proj.weight.data[:] = 0
    assert np.all(existence_head(Tensor(rng.normal(size=(2, 3, 4))), head).data > 0.9999)


def test_alive_mask_straight_through_surrogate_gradcheck(rng):
    p = Tensor(np.array([0.2, 0.7, 0.51]), requires_grad=True)
    m = alive_mask(p)
    assert m.data.tolist() == [0.0, 1.0, 1.0]
    w = np.array([1.0, -2.0, 3.0])
    backward(ops.sum(m * w))
    assert np.array_equal(p.grad, w)  # gradient of the sigmoid surrogate's input, passed straight through


def test_residual_all_alive_is_zero(rng):
    A = attention_weights(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 4))))
    assert np.allclose(residual_energy(A, np.ones((2, 3))), 0.0, atol=1e-15)


def test_residual_all_dead_is_one(rng):
    A = attention_weights(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 4))))
    assert np.array_equal(residual_energy(A, np.zeros((2, 3))), np.ones((2, 5)))


def test_residual_half_alive():
    A = np.full((1, 2, 3), 0.5)
    assert np.allclose(residual_energy(A, np.array([[1.0, 0.0]])), 0.5)


def _state(rng, p):
    B, N = p.shape
    return SlotState(Tensor(rng.normal(size=(B, N, 4))), Tensor(p))


def test_birth_noop_without_residual(rng):
    st_ = _state(rng, np.array([[0.9, 0.1, 0.2]]))
    out, born = slot_birth(st_, Tensor(rng.normal(size=(1, 3, 4))), np.zeros((1, 3)), BirthProjection(4, 4, rng))
    assert not born.any() and out is st_


def test_birth_noop_when_all_alive(rng):
    st_ = _state(rng, np.array([[0.9, 0.8, 0.7]]))
    out, born = slot_birth(st_, Tensor(rng.normal(size=(1, 3, 4))), np.ones((1, 3)), BirthProjection(4, 4, rng))
    assert not born.any()


def test_birth_projects_top_residual_token(rng):
    st_ = _state(rng, np.array([[0.9, 0.1, 0.8]]))
    tokens = rng.normal(size=(1, 3, 4))
    proj = BirthProjection(4, 4, rng)
    out, born = slot_birth(st_, Tensor(tokens), np.array([[0.0, 0.99, 0.0]]), proj)
    assert born.tolist() == [[False, True, False]]
    expected = tokens[0, 1] @ proj.proj.weight.data + proj.proj.bias.data
    assert np.allclose(out.slots.data[0, 1], expected, atol=1e-14)
    assert out.p_alive.data[0, 1] == BIRTH_P_ALIVE
    assert np.array_equal(out.slots.data[0, [0, 2]], st_.slots.data[0, [0, 2]])


@given(st.integers(0, 2**31))
def test_birth_never_touches_alive_slots(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(0, 1, (3, 5))
    st_ = _state(r, p)
    resid = r.uniform(0, 1, (3, 6))
    out, born = slot_birth(st_, Tensor(r.normal(size=(3, 6, 4))), resid, BirthProjection(4, 4, r), threshold=0.3)
    alive = p > 0.5
    assert not (born & alive).any()
    assert np.array_equal(out.slots.data[alive], st_.slots.data[alive])
    assert ((out.p_alive.data > 0.5).sum(-1) >= alive.sum(-1)).all()


# ------------------------------------------------------------ Sinkhorn


def test_sinkhorn_self_match_identity(rng):
    x = Tensor(np.linalg.qr(rng.normal(size=(5, 5)))[0][None])
    P = sinkhorn_match(x, x, iters=50, temperature=0.01).data
    assert np.array_equal(hard_assignment(P)[0], np.arange(5))
    assert np.allclose(P[0], np.eye(5), atol=1e-6)


def test_sinkhorn_uniform_cost_uniform_plan():
    P = sinkhorn_from_cost(Tensor(np.zeros((1, 4, 4))), iters=3).data
    assert np.allclose(P, 0.25, atol=1e-15)


def test_sinkhorn_brute_force(rng):
    for _ in range(10):
        cost = rng.uniform(0, 1, (5, 5))
        best = min(itertools.permutations(range(5)), key=lambda p: sum(cost[i, p[i]] for i in range(5)))
        P = sinkhorn_from_cost(Tensor(cost[None]), iters=30, temperature=0.01).data[0]
        assert tuple(np.argmax(P, axis=1)) == best


def _marginal_error(P):
    return max(np.abs(P.sum(-1) - 1).max(), np.abs(P.sum(-2) - 1).max())


def test_sinkhorn_doubly_stochastic_at_default_temperature():
    """Rows and columns within 1e-4 after 20+ sweeps at the default temperature 0.05."""
    r = np.random.default_rng(0)
    worst = 0.0
    for case in range(50):
        N = int(r.integers(2, 8))
        P = sinkhorn_match(Tensor(r.normal(size=(1, N, 4))), Tensor(r.normal(size=(1, N, 4))),
                           iters=int(r.integers(20, 41))).data
        assert np.all(P >= 0)
        worst = max(worst, _marginal_error(P))
    assert worst <= 1e-4


@given(st.integers(0, 2**31), st.integers(2, 7), st.integers(20, 40))
def test_sinkhorn_doubly_stochastic_at_unit_temperature(seed, N, iters):
    r = np.random.default_rng(seed)
    P = sinkhorn_match(Tensor(r.normal(size=(2, N, 4))), Tensor(r.normal(size=(2, N, 4))), iters=iters,
                       temperature=1.0).data
    assert np.all(P >= 0)
    assert _marginal_error(P) <= 1e-4


@given(st.integers(0, 2**31), st.integers(2, 7))
def test_sinkhorn_last_sweep_normalises_columns_exactly(seed, N):
    r = np.random.default_rng(seed)
    P = sinkhorn_match(Tensor(r.normal(size=(2, N, 4))), Tensor(r.normal(size=(2, N, 4)))).data
    assert np.abs(P.sum(-2) - 1).max() <= 1e-12


def test_sinkhorn_requires_iterations():
    with pytest.raises(ValueError):
        sinkhorn_from_cost(Tensor(np.zeros((1, 2, 2))), iters=0)


def test_sinkhorn_gradcheck(rng):
    f = lambda a, b: sinkhorn_match(a, b, iters=6, temperature=0.5)  # noqa: E731
    assert check_gradients(f, [rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))]) <= 1e-4
