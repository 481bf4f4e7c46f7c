"""
Moving features between maps and token sequences
================================================

Each (layer, expert) pair has an adapter pair: one side reshapes the layer
input into what the expert expects, the other brings the expert output back
to the layer's own output shape.
"""

# %%
import numpy as np

from sagemoe.experts import run_expert
from sagemoe.hub import AdapterPair, adapt_in, adapt_out
from sagemoe.model import ModelConfig, SageUNet
from sagemoe.rng import Rng
from sagemoe.shapes import ShapeSig
from sagemoe.tensor import Tensor

# %%
# A 2x2 single-channel map becomes one token when patchified with p = 2.
x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
a = AdapterPair(ShapeSig.map(1, 2, 2), ShapeSig.tokens(1, 4), ShapeSig.tokens(1, 4), ShapeSig.map(1, 2, 2), Rng(0))
print(adapt_in(x, a).data)

# %%
# Every layer of the toy model can send its input through every expert and
# get back a tensor it can mix with its own main path.
model = SageUNet(ModelConfig())
rng = Rng(1)
for layer in model.layers:
    z = Tensor(rng.normal((1,) + layer.in_sig.extents))
    shapes = []
    for j, adapter in enumerate(layer.adapters):
        y = adapt_out(run_expert(model.pool, j, adapt_in(z, adapter)), adapter)
        shapes.append(y.shape[1:])
    print(f"layer {layer.index} ({layer.kind}) in {layer.in_sig.extents} -> {set(shapes)}")
