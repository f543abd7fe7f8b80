# %% [markdown]
# # Lemma-label disjoint splits
#
# Draws the five shipped split configurations, checks each assignment with
# the verifier, and builds the nested training subsets used for the
# sample-size ablation.

# %%
from collections import Counter

from npnprobe.corpus import filter_corpus
from npnprobe.splitter import FIXTURES, SIMPLE, decremental_subsets, generalization_split, generate_splits, \
    verify_split
from npnprobe.synthetic import npn_corpus

corpus = filter_corpus(npn_corpus(seed=0))
by_id = {i.id: i for i in corpus}

# %%
for name, cfg in FIXTURES.items():
    if cfg.task == "generalization":
        continue
    splits = generate_splits(corpus, cfg)
    reports = [verify_split(corpus, a, cfg) for a in splits]
    print(f"{name:10s} train={len(splits[0].train_ids):3d} test={len(splits[0].test_ids):3d} "
          f"violations={sum(len(r) for r in reports)}")

# %% [markdown]
# The same noun may appear on both sides as long as its label differs.

# %%
a = generate_splits(corpus, SIMPLE)[0]
train = {(by_id[i].lemma_key, by_id[i].cls) for i in a.train_ids}
test = {(by_id[i].lemma_key, by_id[i].cls) for i in a.test_ids}
print("shared (lemma, label) pairs:", len(train & test))
print("lemmas on both sides under different labels:", len({l for l, _ in train} & {l for l, _ in test}))

# %%
for size, subset in zip([480, 240, 120, 60], decremental_subsets(a, [480, 240, 120, 60])):
    cells = Counter((by_id[i].cls, by_id[i].prep) for i in subset)
    print(size, dict(sorted(cells.items())))

# %% [markdown]
# Generalization: train on a/su, test on every succession instance with per/dopo.

# %%
g = generalization_split(corpus, seed=0)
print(Counter(by_id[i].prep for i in g.test_ids), len(g.train_ids), "training ids")
