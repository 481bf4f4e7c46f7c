import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sagemoe import routing as R
from sagemoe import tensor as T
from sagemoe.rng import Rng
from sagemoe.tensor import Tensor

from conftest import central_difference, rel_err


def make_params(d=2, M=2, d_k=2, seed=0):
    return R.RouterParams(d, M, d_k, Rng(seed))


# ---------------------------------------------------------------- shared gate


def test_shared_gate_zero_weights():
    p = make_params(d=3)
    g = R.shared_gate(Tensor(Rng(1).normal((5, 3))), p)
    np.testing.assert_array_equal(g.data, [0.5] * 5)


def test_shared_gate_bias_ln3():
    p = make_params()
    p.b_gate.data[:] = math.log(3)
    assert abs(R.shared_gate(Tensor([[7.0, -2.0]]), p).data[0] - 0.75) < 1e-15


def test_shared_gate_hand_dot():
    p = make_params()
    p.w_gate.data[:] = [[0.5], [-0.25]]
    assert R.shared_gate(Tensor([[1.0, 2.0]]), p).data[0] == 0.5


def test_shared_gate_rejects_non_finite_and_bad_dim():
    p = make_params()
    with pytest.raises(T.NumericError):
        R.shared_gate(Tensor([[np.nan, 0.0]]), p)
    with pytest.raises(ValueError):
        R.shared_gate(Tensor([[1.0, 2.0, 3.0]]), p)


# ---------------------------------------------------------------- affinity logits


def test_sar_zero_input_has_zero_deterministic_part():
    p = make_params(d=4, M=5, d_k=3)
    logits, sigma = R.sar_logits(Tensor(np.zeros((1, 4))), p)
    np.testing.assert_array_equal(logits.data, np.zeros((1, 5)))
    assert (sigma.data > 0).all()


def test_sar_eval_hand_value():
    p = make_params(d=2, M=2, d_k=2)
    p.w_query.data[:] = np.eye(2)
    p.keys.data[:] = np.eye(2)
    logits, _ = R.sar_logits(Tensor([[1.0, 0.0]]), p, "eval")
    np.testing.assert_allclose(logits.data, [[0.70711, 0.0]], atol=1e-5)
    assert logits.data[0, 0] == 1 / math.sqrt(2)


def test_sar_train_noise_reproduces_stream():
    p = make_params(d=3, M=4, d_k=2, seed=3)
    p.w_noise.data[:] = Rng(4).normal((3, 4))
    z = Tensor(Rng(5).normal((2, 3)))
    det, sigma = R.sar_logits(z, p, "eval")
    noisy, _ = R.sar_logits(z, p, "train", Rng.stream(42, 1, 0))
    eps = (noisy.data - det.data) / sigma.data
    np.testing.assert_allclose(eps, Rng.stream(42, 1, 0).normal((2, 4)), rtol=1e-10, atol=1e-12)


def test_sar_invalid_dk_and_mode():
    with pytest.raises(ValueError):
        R.RouterParams(2, 2, 0, Rng(0))
    with pytest.raises(ValueError):
        R.sar_logits(Tensor([[1.0, 0.0]]), make_params(), "predict")


def test_eval_mode_deterministic():
    p = make_params(d=3, M=4, d_k=2, seed=9)
    z = Tensor(Rng(1).normal((3, 3)))
    a = R.route(z, p, np.array([1, 1, 0, 0]), 2, "softmax", "eval")
    b = R.route(z, p, np.array([1, 1, 0, 0]), 2, "softmax", "eval")
    assert a.decision.modulated_logits.tobytes() == b.decision.modulated_logits.tobytes()
    assert a.weights.data.tobytes() == b.weights.data.tobytes()


# ---------------------------------------------------------------- modulation


def test_modulate_hand_values():
    out = R.modulate_logits(Tensor([[0.0, 0.0]]), Tensor([0.8]), np.array([1, 0])).data
    np.testing.assert_allclose(out, [[-0.22314, -1.60944]], atol=1e-5)
    assert out[0, 0] == math.log(0.8)


def test_modulate_half_is_uniform_shift():
    L = Rng(2).normal((1, 6))
    out = R.modulate_logits(Tensor(L), Tensor([0.5]), np.array([1, 0, 1, 0, 0, 1])).data
    np.testing.assert_allclose(out - L, math.log(0.5), atol=1e-15)


def test_modulate_clamps_saturated_gate():
    out = R.modulate_logits(Tensor([[0.0, 0.0, 0.0]]), Tensor([1.0]), np.array([1, 1, 0])).data
    assert np.isfinite(out).all()
    assert abs(out[0, 2] - math.log(1e-7)) < 1e-8  # 1 - (1 - 1e-7) is not exactly 1e-7
    assert abs(out[0, 2] + 16.118) < 1e-3
    assert set(R.select_topk(out, 2)[0]) == {0, 1}


def test_modulate_rejects_bad_mask():
    with pytest.raises(ValueError):
        R.modulate_logits(Tensor([[0.0, 0.0]]), Tensor([0.5]), np.array([1, 2]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_monotone_group_steering(values, g, dg):
    L = np.array([values])
    mask = np.arange(len(values)) % 2
    lo = R.modulate_logits(Tensor(L), Tensor([g]), mask).data
    hi = R.modulate_logits(Tensor(L), Tensor([g + dg]), mask).data
    assert (hi[0, mask == 1] >= lo[0, mask == 1]).all()
    assert (hi[0, mask == 0] <= lo[0, mask == 0]).all()


def test_steering_limits_pick_group_first():
    L = Rng(6).normal((1, 8)) * 3
    mask = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    near_one = R.modulate_logits(Tensor(L), Tensor([1 - 1e-12]), mask).data
    assert set(R.select_topk(near_one, 3)[0]) == {0, 1, 2}
    near_zero = R.modulate_logits(Tensor(L), Tensor([1e-12]), mask).data
    assert set(R.select_topk(near_zero, 5)[0]) == {3, 4, 5, 6, 7}


# ---------------------------------------------------------------- top-K


def test_topk_examples():
    assert set(R.select_topk([3.0, 1.0, 2.0], 2)) == {0, 2}
    assert list(R.select_topk([1.0, 1.0, 1.0, 1.0], 2)) == [0, 1]
    assert set(R.select_topk([-1.0, 5.0, 5.0, 0.0], 2)) == {1, 2}
    assert R.brute_force_topk([-1.0, 5.0, 5.0, 0.0], 2) == (1, 2)


def test_topk_tiebreak_prefers_larger_secondary_key():
    # equal primary scores fall back to the secondary key, then to lower index
    assert list(R.select_topk([1.0, 1.0, 1.0], 1, tiebreak=[0.0, 2.0, 1.0])) == [1]
    assert list(R.select_topk([1.0, 1.0, 1.0], 2, tiebreak=[0.0, 0.0, 0.0])) == [0, 1]
    assert list(R.select_topk([5.0, 1.0, 1.0], 2, tiebreak=[0.0, 0.0, 3.0])) == [0, 2]


def test_topk_invalid_k():
    with pytest.raises(ValueError):
        R.select_topk([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        R.select_topk([1.0, 2.0], 0)


def test_topk_matches_brute_force_exhaustive_small_integers():
    # integer-valued logits produce plenty of ties
    rng = Rng(10)
    for M in range(1, 9):
        for K in range(1, M + 1):
            for _ in range(15):
                v = rng.integers(-2, 3, (M,)).astype(float)
                assert tuple(sorted(R.select_topk(v, K))) == R.brute_force_topk(v, K)


# ---------------------------------------------------------------- gate weights


@pytest.mark.parametrize("variant", ["softmax", "sigmoid"])
def test_gate_equal_logits_uniform(variant):
    w = R.gate_weights(Tensor([[1.5, 1.5, 1.5, -3.0]]), np.array([[0, 1, 2]]), variant).data
    np.testing.assert_allclose(w, [[1 / 3, 1 / 3, 1 / 3, 0.0]], atol=1e-15)


def test_gate_softmax_hand_value():
    w = R.gate_weights(Tensor([[2.0, 1.0]]), np.array([[0, 1]]), "softmax").data
    np.testing.assert_allclose(w, [[0.7311, 0.2689]], atol=1e-4)


def test_gate_sigmoid_zero_logits():
    w = R.gate_weights(Tensor([[0.0, 0.0]]), np.array([[0, 1]]), "sigmoid").data
    np.testing.assert_array_equal(w, [[0.5, 0.5]])


def test_gate_sigmoid_underflow_fallback():
    w = R.gate_weights(Tensor([[-1e4, -2e4, 5.0]]), np.array([[0, 1]]), "sigmoid").data
    np.testing.assert_array_equal(w, [[0.5, 0.5, 0.0]])


def test_gate_unknown_variant():
    with pytest.raises(ValueError):
        R.gate_weights(Tensor([[0.0]]), np.array([[0]]), "relu")


@pytest.mark.parametrize("variant", ["softmax", "sigmoid"])
def test_gate_weight_gradients(variant):
    L = Tensor(Rng(3).normal((2, 5)), requires_grad=True)
    topk = R.select_topk(L, 3)
    c = Rng(4).normal((2, 5))

    def f():
        return T.sum(T.mul(R.gate_weights(L, topk, variant), c))

    f().backward()
    num = central_difference(lambda: f().item(), L.data)
    assert rel_err(L.grad, num, 1e-7) < 1e-6


# ---------------------------------------------------------------- balance loss


def test_balance_examples():
    for M in (2, 5, 20):
        u = np.full(M, 1.0 / M)
        assert abs(R.load_balance_loss(R.LoadBalanceStats.from_vectors(u, u)) - 1.0) <= 1e-12
        e = np.eye(M)[0]
        assert abs(R.load_balance_loss(R.LoadBalanceStats.from_vectors(e, e)) - M) <= 1e-12
    stats = R.LoadBalanceStats.from_vectors([0.5, 0.5, 0, 0], [0.4, 0.4, 0.1, 0.1])
    assert abs(R.load_balance_loss(stats) - 1.6) < 1e-12


def test_balance_f_normalised_by_k_and_p_sums_to_one():
    rng = Rng(12)
    stats = R.LoadBalanceStats(6, 2)
    for _ in range(5):
        L = rng.normal((4, 6))
        d = R.route(Tensor(rng.normal((4, 3))), make_params(3, 6, 2, 1), np.array([1, 1, 0, 0, 0, 0]), 2, "softmax")
        stats.add(d.decision.topk_indices, d.decision.probs())
        del L
    assert abs(stats.f.sum() - 1.0) < 1e-12
    assert abs(stats.P.sum() - 1.0) < 1e-9
    assert stats.count == 20


def test_balance_requires_samples():
    with pytest.raises(ValueError):
        R.load_balance_loss(R.LoadBalanceStats(3, 1))


def test_balance_merge_order_independent():
    rng = Rng(13)
    parts = []
    for _ in range(3):
        s = R.LoadBalanceStats(4, 2)
        s.add(np.array([[0, 1], [2, 3]]), rng.uniform((2, 4)))
        parts.append(s)
    a = parts[0].merge(parts[1]).merge(parts[2])
    b = parts[2].merge(parts[0]).merge(parts[1])
    np.testing.assert_allclose(a.f, b.f, atol=1e-15)
    np.testing.assert_allclose(a.P, b.P, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.data())
def test_balance_bounds_rearrangement(M, data):
    raw_f = np.array(data.draw(st.lists(st.floats(0.01, 1), min_size=M, max_size=M)))
    raw_p = np.array(data.draw(st.lists(st.floats(0.01, 1), min_size=M, max_size=M)))
    f, P = raw_f / raw_f.sum(), raw_p / raw_p.sum()
    loss = R.load_balance_loss(R.LoadBalanceStats.from_vectors(f, P))
    perms = [M * float(np.dot(f, P[list(p)])) for p in itertools.permutations(range(M))]
    assert min(perms) - 1e-12 <= loss <= max(perms) + 1e-12
    assert loss <= M + 1e-12


def test_balance_gradient_through_p_only():
    logits = Tensor(Rng(14).normal((3, 4)), requires_grad=True)
    topk = R.select_topk(logits, 2)

    def f():
        s = R.LoadBalanceStats(4, 2)
        s.add(topk, T.softmax(logits, axis=-1))
        return R.load_balance_loss(s)

    f().backward()
    num = central_difference(lambda: f().item(), logits.data)
    assert rel_err(logits.grad, num, 1e-7) < 1e-6


# ---------------------------------------------------------------- full routing invariants


def test_route_sparsity_and_weights():
    p = make_params(d=4, M=6, d_k=3, seed=21)
    z = Tensor(Rng(22).normal((10, 4)))
    for variant in ("softmax", "sigmoid"):
        r = R.route(z, p, np.array([1, 1, 0, 0, 0, 0]), 3, variant, "train", Rng(1))
        w = r.decision.gate_weights
        assert ((w != 0).sum(axis=-1) == 3).all()
        assert (np.abs(w.sum(axis=-1) - 1) <= 1e-12).all()
        assert (w >= 0).all()
        sel = R.selection_mask(r.decision.topk_indices, 6)
        assert (w[~sel] == 0).all()


def test_frozen_topk_overrides_selection():
    p = make_params(d=2, M=4, d_k=2)
    r = R.route(Tensor([[1.0, 2.0]]), p, np.zeros(4), 2, "softmax", frozen_topk=np.array([[3, 1]]))
    assert r.decision.topk_indices.tolist() == [[3, 1]]
    assert (r.decision.gate_weights[0, [0, 2]] == 0).all()
