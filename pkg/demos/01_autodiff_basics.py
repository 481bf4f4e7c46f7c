"""
Reverse-mode gradients on numpy arrays
======================================

Everything in the model is built from a small tape of numpy operations.
This script shows the pieces: a leaf tensor, a few ops, ``backward`` and a
finite-difference check of the result.
"""

# %%
import numpy as np

from sagemoe import tensor as T
from sagemoe.rng import Rng
from sagemoe.tensor import Tensor

rng = Rng(0)
w = Tensor(rng.normal((3, 4)), requires_grad=True)
x = rng.normal((5, 3))

# %%
# A scalar built from a matmul, a softmax and a sum.
loss = T.sum(T.mul(T.softmax(T.matmul(x, w), axis=-1), np.arange(4.0)))
loss.backward()
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# %%
# Central differences agree with the analytic gradient.
h = 1e-5
numeric = np.zeros_like(w.data)
for idx in np.ndindex(w.shape):
    orig = w.data[idx]
    w.data[idx] = orig + h
    up = T.sum(T.mul(T.softmax(T.matmul(x, w), axis=-1), np.arange(4.0))).item()
    w.data[idx] = orig - h
    down = T.sum(T.mul(T.softmax(T.matmul(x, w), axis=-1), np.arange(4.0))).item()
    w.data[idx] = orig
    numeric[idx] = (up - down) / (2 * h)
print("max abs difference", np.abs(numeric - w.grad).max())

# %%
# Softmax over a subset of positions leaves the rest at exactly zero and is
# unaffected by large offsets.
print(T.softmax_over(Tensor([1000.0, 999.0, 3.0]), [0, 1]).data)

# %%
# Random streams are counter based, so the same (seed, keys) always gives the same draws.
print(Rng.stream(42, 1, 0).normal((3,)))
print(Rng.stream(42, 1, 0).normal((3,)))
