"""
Training on synthetic blobs
===========================

A short run of the full pipeline: generate data, train, look at the history
and evaluate the best checkpoint. The acceptance run uses 30 epochs; this one
stops after a few so it finishes in well under a minute.
"""

# %%
import sys

import numpy as np

from sagemoe.data import split_samples, synth_blobs
from sagemoe.model import ModelConfig, SageUNet, mean_metrics, predict
from sagemoe.train import TrainPlan, history_csv, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 4
samples = synth_blobs(120, 32, 32, seed=42)
train_set, val_set = split_samples(samples, seed=42)
print(len(train_set), "train /", len(val_set), "val")
print("foreground fractions", np.round([s.mask.mean() for s in samples[:8]], 3))

# %%
model = SageUNet(ModelConfig(seed=42))
print("parameters", model.num_parameters())
result = train(model, train_set, val_set, TrainPlan(epochs=epochs, seed=42))
print(history_csv(result.history, len(model.layers)))

# %%
# Reload the best weights and score the validation set per image.
model.load_state_dict(result.best_state)
pairs = [(predict(model, s.image).mask()[0] == 1, s.mask == 1) for s in val_set]
acc, iou, dsc = mean_metrics(pairs)
print(f"best epoch {result.best_epoch}: acc {acc:.4f} iou {iou:.4f} dsc {dsc:.4f}")
