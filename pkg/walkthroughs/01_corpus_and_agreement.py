# %% [markdown]
# # Corpus records, validation and annotator agreement
#
# Builds a synthetic Italian NPN corpus, checks every record against the
# construction invariants, applies the frequency filter, and scores a
# simulated cross-annotation round.

# %%
import sys
import tempfile
from collections import Counter
from pathlib import Path

from npnprobe.corpus import (
    ConstructionInstance, calibrate_penalty, filter_corpus, krippendorff_alpha, load_corpus, pairwise_kappas,
    validate_instance, write_corpus,
)
from npnprobe.synthetic import annotation_table, npn_corpus

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)

# %%
corpus = npn_corpus(seed=0)
print(len(corpus), "instances")
print(Counter((i.cls, i.prep) for i in corpus).most_common(6))

# %% [markdown]
# A well-formed instance has the same noun on both sides of the preposition.
# Breaking that identity is reported, not silently dropped.

# %%
good = ConstructionInstance("ok", "Salivano gradino su gradino.", (9, 27), "su", "gradino", "gradino",
                            "singular", "CXN", "greater_plurality_accumulation")
bad = ConstructionInstance("bad", "Salivano gradino su scalino.", (9, 27), "su", "gradino", "gradino",
                           "singular", "CXN", "greater_plurality_accumulation")
print(validate_instance(good))
print(validate_instance(bad))

# %%
write_corpus(corpus, out / "corpus.tsv")
loaded = load_corpus(out / "corpus.tsv")
print("valid", len(loaded.instances), "rejected", len(loaded.rejections))

filtered = filter_corpus(loaded.instances, min_tokens=6, max_per_lemma_prep=30, seed=0)
print("after filter", len(filtered))

# %% [markdown]
# Agreement: pairwise Cohen kappa, nominal Krippendorff alpha, and the
# penalty on the succession/accumulation pair that would lift alpha to a
# chosen target.

# %%
records = annotation_table(n_items=100, n_annotators=5, seed=0)
kappas = pairwise_kappas(records)
print("kappa range", round(min(kappas.values()), 3), round(max(kappas.values()), 3))
alpha = krippendorff_alpha(records)
print("nominal alpha", round(alpha, 3))
print("penalty for alpha + 0.03:", calibrate_penalty(records, alpha + 0.03))
