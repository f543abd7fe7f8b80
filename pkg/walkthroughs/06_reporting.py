# %% [markdown]
# # Curves, confusion matrices and PCA views
#
# Renders the three figure types from synthetic results and writes the
# tables they are drawn from.

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from npnprobe.corpus import filter_corpus
from npnprobe.probe import aggregate, run_experiment
from npnprobe.report import (
    CurveSpec, export_results, pca_project, render_confusion, render_layer_curves, render_pca, write_coordinates,
)
from npnprobe.splitter import DISAMBIG, generate_splits, task_label
from npnprobe.synthetic import layer_features, npn_corpus

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
corpus = filter_corpus(npn_corpus(seed=0))
splits = generate_splits(corpus, DISAMBIG.replace(n_splits=3))
feats = layer_features(corpus, "disambiguation", n_layers=6, hidden=24, seed=0)
cells = run_experiment(corpus, DISAMBIG, splits, ["toy"], modes=["UNK", "PREP"],
                       features={("toy", "UNK"): feats, ("toy", "PREP"): feats})
summary = aggregate(cells)

# %%
print(export_results(summary, "delimited-table", out / "summary.tsv"))
print(render_layer_curves(summary, CurveSpec("DISAMBIG"), out / "curves"))

# %%
top = [r for r in summary if r.mode in ("UNK", "PREP") and r.layer == 6 and r.train_size == 360]
print(render_confusion({r.mode: r.confusion for r in top}, top[0].classes, out / "confusion"))

# %%
ids = sorted({i for a in splits for i in a.train_ids})
by_id = {i.id: i for i in corpus}
block = np.stack([feats[i] for i in ids])
labels = [task_label(by_id[i], "disambiguation") for i in ids]
layers = [pca_project(block, labels, layer, subset=180, ids=ids) for layer in range(block.shape[1])]
print("explained variance, top layer:", np.round(layers[-1].ratios, 3))
write_coordinates(layers, out / "pca.coords.tsv")
print(render_pca(layers[-1], out / "pca"))
