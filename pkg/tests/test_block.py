import numpy as np
import pytest

import sagemoe.block as block_mod
from sagemoe import tensor as T
from sagemoe.model import ModelConfig, SageUNet
from sagemoe.rng import Rng
from sagemoe.tensor import Tensor


@pytest.fixture(scope="module")
def model():
    return SageUNet(ModelConfig(seed=3))


def layer_input(layer, b=3, seed=0):
    return Tensor(Rng(seed).normal((b,) + layer.in_sig.extents))


def paths(layer, z, theta):
    layer.theta.data[...] = theta
    fused, r = layer(z)
    return fused.data, layer.main(z).data, layer.expert_path(z, r).data


@pytest.mark.parametrize("index", [0, 2])
def test_fusion_saturation_and_midpoint(model, index):
    layer = model.layers[index]
    z = layer_input(layer)
    old = layer.theta.data.copy()
    try:
        fused, main, expert = paths(layer, z, 30.0)
        np.testing.assert_allclose(fused, main, rtol=0, atol=1e-9)
        fused, main, expert = paths(layer, z, -30.0)
        np.testing.assert_allclose(fused, expert, rtol=0, atol=1e-9)
        fused, main, expert = paths(layer, z, 0.0)
        np.testing.assert_array_equal(fused, 0.5 * (main + expert))
    finally:
        layer.theta.data[...] = old


@pytest.mark.parametrize("theta", [-3.0, -0.5, 0.7, 2.0, 5.0])
def test_fusion_convexity(model, theta):
    layer = model.layers[1]
    z = layer_input(layer, seed=1)
    old = layer.theta.data.copy()
    try:
        fused, main, expert = paths(layer, z, theta)
    finally:
        layer.theta.data[...] = old
    lo, hi = np.minimum(main, expert), np.maximum(main, expert)
    assert (fused >= lo - 1e-12).all() and (fused <= hi + 1e-12).all()


def test_expert_path_runs_exactly_the_selected_experts(model, monkeypatch):
    calls = []
    real = block_mod.run_expert

    def spy(pool, j, x):
        calls.append((j, x.shape[0]))
        return real(pool, j, x)

    monkeypatch.setattr(block_mod, "run_expert", spy)
    layer = model.layers[0]
    _, r = layer(layer_input(layer, b=5), mode="train", rng=Rng(9))
    topk = r.decision.topk_indices
    assert topk.shape == (5, layer.K)
    expected = {int(j): int((topk == j).any(-1).sum()) for j in np.unique(topk)}
    assert dict(calls) == expected
    assert sum(n for _, n in calls) == 5 * layer.K


def test_routing_decision_is_pure(model):
    layer = model.layers[2]
    z = layer_input(layer, seed=4)
    _, a = layer(z, mode="train", rng=Rng.stream(11, 1, 2))
    _, b = layer(z, mode="train", rng=Rng.stream(11, 1, 2))
    for name in ("g_s", "base_logits", "modulated_logits", "topk_indices", "gate_weights"):
        assert getattr(a.decision, name).tobytes() == getattr(b.decision, name).tobytes()


def test_gradient_reaches_selected_and_skips_unselected():
    model = SageUNet(ModelConfig(seed=5))
    layer = model.layers[2]
    z = layer_input(layer, b=1, seed=2)
    model.zero_grad()
    fused, r = layer(z)
    T.sum(T.mul(fused, Rng(3).normal(fused.shape))).backward()
    selected = set(r.decision.topk_indices[0].tolist())
    for p in (layer.theta, layer.router.w_gate, layer.router.keys, layer.router.w_query):
        assert p.grad is not None and np.any(p.grad != 0)
    own = model.pool.S + layer.index  # this layer's backbone block is also its main path
    for j, expert in enumerate(model.pool):
        expert_grads = [p.grad for p in expert.module.parameters()]
        adapter_grads = [p.grad for p in layer.adapters[j].parameters()]
        if j in selected:
            assert any(g is not None and np.any(g != 0) for g in adapter_grads)
            assert any(g is not None and np.any(g != 0) for g in expert_grads)
        else:
            assert all(g is None or not np.any(g) for g in adapter_grads)
            if j != own:
                assert all(g is None or not np.any(g) for g in expert_grads)


def test_block_rejects_wrong_input(model):
    with pytest.raises(ValueError):
        model.layers[0](Tensor(np.zeros((1, 3, 32, 32))))
