"""Static word-vector baselines keyed on the construction's noun.

Two file formats are read: plain text (``word v1 v2 ...`` per line with an
optional ``count dim`` header, as used by GloVe and fastText ``.vec``) and
the fastText binary model, whose character n-gram buckets let us compose
vectors for unseen words.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ConstructionInstance

log = logging.getLogger(__name__)

FASTTEXT_MAGIC = 793712314
FASTTEXT_VERSION = 12
OOV_POLICIES = ("subword-compose", "zero-vector", "error")


class OutOfVocabulary(KeyError):
    pass


def fasttext_hash(ngram: str) -> int:
    """32-bit FNV-1a over UTF-8 bytes, with fastText's signed-char quirk."""
    h = 2166136261
    for b in ngram.encode("utf-8"):
        if b >= 128:
            b |= 0xFFFFFF00  # int8 -> uint32 sign extension
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


def char_ngrams(word: str, minn: int, maxn: int) -> list[str]:
    """Character n-grams of ``<word>`` in fastText order (the bare brackets excluded)."""
    w = f"<{word}>"
    out = []
    for i in range(len(w)):
        for n in range(1, maxn + 1):
            if i + n > len(w):
                break
            if n >= minn and not (n == 1 and (i == 0 or i + n == len(w))):
                out.append(w[i:i + n])
    return out


@dataclass
class StaticVectorTable:
    dim: int
    words: dict[str, int]
    vectors: np.ndarray  # word rows; for binary models the raw input rows
    source_id: str
    oov_policy: str = "subword-compose"
    ngrams: np.ndarray | None = None  # (bucket, dim) for subword-aware tables
    minn: int = 0
    maxn: int = 0
    compose_known: bool = False  # binary models average word row and n-gram rows
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.oov_policy not in OOV_POLICIES:
            raise ValueError(f"unknown oov_policy {self.oov_policy!r}")
        if self.vectors.shape[1:] != (self.dim,):
            raise ValueError(f"vectors have shape {self.vectors.shape}, expected (*, {self.dim})")
        if not np.isfinite(self.vectors).all():
            raise ValueError(f"{self.source_id}: non-finite entries")
        if self.oov_policy == "subword-compose" and not self.supports_subwords:
            log.warning("%s has no subword table; unseen words map to zero vectors", self.source_id)
            self.oov_policy = "zero-vector"

    @property
    def supports_subwords(self) -> bool:
        return self.ngrams is not None and self.ngrams.shape[0] > 0 and self.maxn > 0

    def __contains__(self, word):
        return word in self.words

    def subword_rows(self, word: str) -> list[int]:
        bucket = self.ngrams.shape[0]
        return [fasttext_hash(g) % bucket for g in char_ngrams(word, self.minn, self.maxn)]

    def compose(self, word: str) -> np.ndarray:
        rows = self.subword_rows(word)
        parts = [self.ngrams[r] for r in rows]
        if word in self.words:
            parts.insert(0, self.vectors[self.words[word]])
        if not parts:
            return np.zeros(self.dim, dtype=np.float32)
        return np.mean(parts, axis=0, dtype=np.float64).astype(np.float32)

    def vector(self, word: str) -> np.ndarray:
        if word in self._cache:
            return self._cache[word]
        if word in self.words:
            v = self.compose(word) if self.compose_known else self.vectors[self.words[word]]
        elif self.oov_policy == "subword-compose":
            v = self.compose(word)
        elif self.oov_policy == "zero-vector":
            v = np.zeros(self.dim, dtype=np.float32)
        else:
            raise OutOfVocabulary(f"{word!r} not in {self.source_id}")
        v = np.asarray(v, dtype=np.float32)
        self._cache[word] = v
        return v

    # ------------------------------------------------------------------
    # loaders

    @classmethod
    def from_text(cls, path, source_id=None, oov_policy="zero-vector", limit=None) -> "StaticVectorTable":
        path = Path(path)
        words, rows = {}, []
        with open(path, encoding="utf-8", errors="replace") as fh:
            first = fh.readline().rstrip("\n").split(" ")
            dim = None
            if len(first) == 2 and all(p.isdigit() for p in first):
                dim = int(first[1])
            else:
                fh.seek(0)
            for line in fh:
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                if dim is None:
                    dim = len(parts) - 1
                if len(parts) - 1 != dim:
                    raise ValueError(f"{path}: {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
                if parts[0] in words:
                    continue
                words[parts[0]] = len(rows)
                rows.append(np.asarray(parts[1:], dtype=np.float32))
                if limit and len(rows) >= limit:
                    break
        vectors = np.vstack(rows) if rows else np.zeros((0, dim or 0), dtype=np.float32)
        return cls(dim or 0, words, vectors, source_id or path.name, oov_policy)

    @classmethod
    def from_fasttext_bin(cls, path, source_id=None, oov_policy="subword-compose") -> "StaticVectorTable":
        path = Path(path)
        with open(path, "rb") as fh:
            magic, version = struct.unpack("<ii", fh.read(8))
            if magic != FASTTEXT_MAGIC:
                raise ValueError(f"{path}: not a fastText binary model")
            dim, ws, epoch, min_count, neg, word_ngrams, loss, model, bucket, minn, maxn, lr_update = \
                struct.unpack("<12i", fh.read(48))
            fh.read(8)  # sampling threshold t
            size, nwords, nlabels = struct.unpack("<3i", fh.read(12))
            _ntokens, prune_size = struct.unpack("<2q", fh.read(16))
            words = {}
            for k in range(size):
                raw = bytearray()
                while (c := fh.read(1)) != b"\x00":
                    raw += c
                fh.read(9)  # count int64, entry type int8
                if k < nwords:
                    words[raw.decode("utf-8", errors="replace")] = k
            if prune_size > 0:
                raise ValueError(f"{path}: pruned (quantized-dictionary) models are not supported")
            if fh.read(1) != b"\x00":
                raise ValueError(f"{path}: quantized models are not supported")
            m, n = struct.unpack("<2q", fh.read(16))
            offset = fh.tell()
        # real models are several GB; map instead of reading
        matrix = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(m, n))
        if n != dim:
            raise ValueError(f"{path}: matrix width {n} != dim {dim}")
        return cls(dim, words, matrix[:nwords], source_id or path.name, oov_policy,
                   ngrams=matrix[nwords:nwords + bucket], minn=minn, maxn=maxn, compose_known=True)

    @classmethod
    def load(cls, path, format=None, **kw) -> "StaticVectorTable":
        path = Path(path)
        if format is None:
            format = "fasttext-bin" if path.suffix == ".bin" else "text"
        if format == "fasttext-bin":
            return cls.from_fasttext_bin(path, **kw)
        if format == "text":
            return cls.from_text(path, **kw)
        raise ValueError(f"unknown vector format {format!r}")


def save_fasttext_bin(path, words, word_rows, ngram_rows, minn=3, maxn=6) -> None:
    """Write the unquantized fastText binary layout (input matrix only matters here)."""
    word_rows = np.asarray(word_rows, dtype="<f4")
    ngram_rows = np.asarray(ngram_rows, dtype="<f4")
    dim = word_rows.shape[1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", FASTTEXT_MAGIC, FASTTEXT_VERSION))
        fh.write(struct.pack("<12i", dim, 5, 5, 1, 5, 1, 2, 2, ngram_rows.shape[0], minn, maxn, 100))
        fh.write(struct.pack("<d", 1e-4))
        fh.write(struct.pack("<3i", len(words), len(words), 0))
        fh.write(struct.pack("<2q", len(words), -1))
        for w in words:
            fh.write(w.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<qb", 1, 0))
        fh.write(b"\x00")
        matrix = np.vstack([word_rows, ngram_rows])
        fh.write(struct.pack("<2q", *matrix.shape))
        fh.write(matrix.tobytes(order="C"))
        fh.write(b"\x00")
        fh.write(struct.pack("<2q", 1, dim))
        fh.write(np.zeros(dim, dtype="<f4").tobytes())


def lemma_features(instance: ConstructionInstance, table: StaticVectorTable) -> np.ndarray:
    return table.vector(instance.noun_lemma)


def form_features(instance: ConstructionInstance, table: StaticVectorTable) -> np.ndarray:
    return table.vector(instance.noun_form)


def feature_matrix(instances, table: StaticVectorTable, key: str = "lemma") -> np.ndarray:
    fn = lemma_features if key == "lemma" else form_features
    if not instances:
        return np.zeros((0, table.dim), dtype=np.float32)
    return np.vstack([fn(i, table) for i in instances])
