# %% [markdown]
# # Probes, control tasks and the experiment grid
#
# Synthetic layer features carry a class signal that grows with depth. The
# task probe should climb with it while the control probe, trained on random
# per-lemma labels, stays near the majority rate at every layer.

# %%
import numpy as np

from npnprobe.corpus import filter_corpus
from npnprobe.probe import CONTROL, aggregate, run_experiment
from npnprobe.splitter import SIMPLE, generate_splits
from npnprobe.synthetic import layer_features, npn_corpus

corpus = filter_corpus(npn_corpus(seed=0))
splits = generate_splits(corpus, SIMPLE)
features = layer_features(corpus, "identification", n_layers=12, hidden=32, seed=0)
cells = run_experiment(corpus, SIMPLE, splits, ["synthetic"], modes=["UNK"],
                       features={("synthetic", "UNK"): features})
summary = aggregate(cells)
print(len(cells), "cells,", len(summary), "summary rows")

# %%
full = max(r.train_size for r in summary if r.mode == "UNK")
print("layer  task  control")
for layer in range(13):
    task = next(r for r in summary if r.mode == "UNK" and r.layer == layer and r.train_size == full)
    ctrl = next(r for r in summary if r.mode == CONTROL and r.layer == layer)
    print(f"{layer + 1:5d}  {task.mean_accuracy:.3f}  {ctrl.mean_accuracy:.3f}")

# %% [markdown]
# Sample-size ablation at the top layer.

# %%
for r in summary:
    if r.mode == "UNK" and r.layer == 12:
        print(r.train_size, round(r.mean_accuracy, 3), "+/-", round(r.std_accuracy, 3))
