# %% [markdown]
# # Layer-wise extraction and the embedding cache
#
# Uses a tiny randomly initialised BERT written to disk, so the walkthrough
# runs offline. Pass a hub id or model directory as the first argument to use
# a real encoder instead.

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from npnprobe.corpus import ConstructionInstance
from npnprobe.encoder import EmbeddingStore, EncoderHandle, align_target, extract_embeddings, substituted_text
from npnprobe.synthetic import tiny_bert

work = Path(tempfile.mkdtemp())
sentence = "Giorno dopo giorno la casa cresceva sotto gli occhi di tutti."
if len(sys.argv) > 1:
    encoder = EncoderHandle.load(sys.argv[1])
else:
    # "dopo" is left out of the vocabulary so it splits into two pieces
    encoder = EncoderHandle.load(str(tiny_bert(work / "bert", [sentence], n_layers=4, hidden=16,
                                               drop_words=["dopo"], extra_pieces=["do", "##po"])))
inst = ConstructionInstance("g1", sentence, (0, 18), "dopo", "giorno", "Giorno", "singular", "CXN",
                            "succession_iteration_distributivity")

# %%
enc = encoder.encode(sentence)
i, j = align_target(sentence, inst.prep_char_span(), enc.table())
print("preposition pieces:", enc.tokens[i:j])
print("with the placeholder:", substituted_text(sentence, inst.prep_char_span(), encoder)[0])

# %%
prep = extract_embeddings(encoder, inst, "PREP")
unk = extract_embeddings(encoder, inst, "UNK")
print("rows (input embeddings + each layer):", prep.matrix.shape)
cos = [float(a @ b / np.linalg.norm(a) / np.linalg.norm(b)) for a, b in zip(prep.matrix, unk.matrix)]
print("PREP vs UNK cosine by layer:", np.round(cos, 3))

# %%
with EmbeddingStore(work / "cache") as store:
    store.write(prep)
    store.write(unk)
again = EmbeddingStore(work / "cache").read("g1", "PREP", encoder.model_id, prep.extraction_fingerprint)
print("bit-exact round trip:", again.matrix.tobytes() == prep.matrix.tobytes())
