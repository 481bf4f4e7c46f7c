"""
Hierarchical routing step by step
=================================

One routing decision per sample: a shared gate picks between the shared and
the fine-grained expert groups, query/key affinities rank the experts, and
only the top-K get non-zero weight.
"""

# %%
import numpy as np

from sagemoe import routing as R
from sagemoe.rng import Rng
from sagemoe.tensor import Tensor

d, M, K = 8, 6, 2
shared_mask = np.array([1, 1, 0, 0, 0, 0])
params = R.RouterParams(d, M, d_k=4, rng=Rng(1))
zbar = Tensor(Rng(2).normal((3, d)))

# %%
# With a freshly initialised gate every sample sits at g_s = 0.5, so the
# group modulation is a uniform shift and changes nothing.
result = R.route(zbar, params, shared_mask, K, "softmax")
d0 = result.decision
print("g_s", d0.g_s)
print("top-k", d0.topk_indices.tolist())
print("weights\n", d0.gate_weights.round(3))

# %%
# Push the gate towards the shared group and watch the selection move there.
params.b_gate.data[:] = 6.0
d1 = R.route(zbar, params, shared_mask, K, "softmax").decision
print("g_s", d1.g_s.round(4))
print("top-k", d1.topk_indices.tolist())

# %%
# And the other way.
params.b_gate.data[:] = -6.0
d2 = R.route(zbar, params, shared_mask, K, "softmax").decision
print("top-k", d2.topk_indices.tolist())

# %%
# Training mode adds input-dependent Gaussian noise to the affinities.
params.b_gate.data[:] = 0.0
params.w_noise.data[:] = Rng(3).normal((d, M))
noisy = R.route(zbar, params, shared_mask, K, "sigmoid", mode="train", rng=Rng(4)).decision
print("noise scale\n", noisy.noise_scale.round(3))
print("noisy top-k", noisy.topk_indices.tolist())

# %%
# The balance penalty is 1 for perfectly spread routing and M for total collapse.
u = np.full(M, 1 / M)
print("uniform", R.load_balance_loss(R.LoadBalanceStats.from_vectors(u, u)))
e = np.eye(M)[0]
print("collapsed", R.load_balance_loss(R.LoadBalanceStats.from_vectors(e, e)))
