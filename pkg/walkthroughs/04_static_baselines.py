# %% [markdown]
# # Static word-vector baselines
#
# Writes a small fastText-format binary, then keys vectors on the noun lemma
# and on its inflected form. Unseen words are composed from character
# n-grams. Pass a real ``.bin`` path as the first argument to use it instead.

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from npnprobe.staticvec import StaticVectorTable, char_ngrams, feature_matrix
from npnprobe.synthetic import small_corpus, tiny_fasttext

corpus = small_corpus(200, seed=0)
if len(sys.argv) > 1:
    table = StaticVectorTable.load(sys.argv[1])
else:
    path = tiny_fasttext(Path(tempfile.mkdtemp()) / "vectors.bin", [i.noun_lemma for i in corpus], dim=16)
    table = StaticVectorTable.load(path)
print(table.source_id, "dim", table.dim, "words", len(table.words), "subwords", table.supports_subwords)

# %%
print(char_ngrams("strati", table.minn, min(table.maxn, 4))[:8])
plural = next(i for i in corpus if i.number == "plural")
print(plural.noun_lemma, "->", plural.noun_form, "in vocabulary:", plural.noun_form in table)

# %%
lemma_X = feature_matrix(corpus, table, "lemma")
form_X = feature_matrix(corpus, table, "form")
same = [np.array_equal(a, b) for a, b in zip(lemma_X, form_X)]
print("rows identical for singular nouns:", all(s for s, i in zip(same, corpus) if i.noun_form == i.noun_lemma))
print("rows differing:", len(same) - sum(same))
