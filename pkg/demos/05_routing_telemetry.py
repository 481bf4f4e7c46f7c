"""
Where does the router send things?
==================================

Collect routing decisions over a dataset and export the affinity heatmap,
the top-K activation map and the shared-gate statistics.
"""

# %%
import sys
import tempfile
from pathlib import Path

from sagemoe.data import synth_blobs
from sagemoe.model import ModelConfig, SageUNet
from sagemoe.telemetry import TelemetryLog, export_gs, export_heatmap
from sagemoe.train import TrainPlan, evaluate, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="routing-"))
data = synth_blobs(40, 32, 32, seed=3)
model = SageUNet(ModelConfig(seed=3))
train(model, data[:32], data[32:], TrainPlan(epochs=2, seed=3))

# %%
log = TelemetryLog.for_model(model)
evaluate(model, data, telemetry=log)
print("affinity (rows are layers, columns experts)")
print(log.affinity().round(3))
print("unused experts per layer", log.unused_experts())
print("balance loss per layer", [round(v, 3) for v in log.balance_losses()])

# %%
for kind in ("affinity", "activation"):
    print("wrote", export_heatmap(log, kind, out / f"{kind}.csv"))
print("wrote", export_gs(log, out / "gs.csv"))
print((out / "gs.csv").read_text())
