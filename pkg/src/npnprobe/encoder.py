"""Layer-wise target-token vectors from masked-language encoders, with a disk cache.

Cache layout, one pair of files per (model_id, mode)::

    <key>.f32         raw little-endian float32, row-major, shape
                      [n_instances, n_layers + 1, hidden]; entry k starts at
                      byte k * (n_layers + 1) * hidden * 4
    <key>.index.json  {"model_id", "mode", "n_rows", "hidden", "dtype": "<f4",
                       "ids": [...], "fingerprints": [...], "crc32": [...]}

``<key>`` is the model id with path separators replaced, ``__`` and the
mode. Entry order follows write order; ``crc32`` covers each entry's bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ConstructionInstance, prep_matches

log = logging.getLogger(__name__)

PREP, UNK = "PREP", "UNK"
MODES = (PREP, UNK)


class AlignmentError(ValueError):
    pass


class CapabilityError(RuntimeError):
    """The encoder lacks a feature the extraction needs."""


class ResourceError(RuntimeError):
    """A model or tokenizer could not be loaded."""


class CacheMiss(KeyError):
    pass


class StaleCacheError(RuntimeError):
    pass


class CorruptCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetSpec:
    mode: str
    char_span: tuple[int, int]

    @classmethod
    def for_instance(cls, inst: ConstructionInstance, mode: str) -> "TargetSpec":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        span = inst.prep_char_span()
        if span is None:
            raise AlignmentError(f"{inst.id}: preposition {inst.prep!r} not found in span")
        target = cls(mode, span)
        target.check(inst)
        return target

    def check(self, inst: ConstructionInstance) -> None:
        s, e = self.char_span
        if not (inst.span[0] <= s < e <= inst.span[1]):
            raise AlignmentError(f"{inst.id}: target {self.char_span} outside span {inst.span}")
        if not prep_matches(inst.sentence[s:e], inst.prep):
            raise AlignmentError(f"{inst.id}: target text {inst.sentence[s:e]!r} is not {inst.prep!r}")


@dataclass
class LayerEmbeddingSet:
    instance_id: str
    mode: str
    matrix: np.ndarray  # (n_layers + 1, hidden) float32, row 0 = input embeddings
    model_id: str
    extraction_fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise ValueError(f"{self.instance_id}: non-finite values in embeddings")


def extraction_fingerprint(model_id: str, tokenizer_version: str, mode: str, sentence: str,
                           char_span=None) -> str:
    payload = json.dumps([model_id, tokenizer_version, mode, sentence,
                          list(char_span) if char_span else None], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


# --------------------------------------------------------------------------
# alignment and pooling


def _trimmed(sentence: str, start: int, end: int) -> tuple[int, int]:
    while start < end and sentence[start].isspace():
        start += 1
    while end > start and sentence[end - 1].isspace():
        end -= 1
    return start, end


def align_target(sentence: str, char_span, tokenization: Sequence) -> tuple[int, int]:
    """Half-open subtoken range covering ``char_span``.

    ``tokenization`` is a list of ``(subtoken, (start, end))`` pairs; entries
    with empty ranges (special tokens) never match. Offsets are trimmed of
    surrounding whitespace first, which removes the space that sentencepiece
    and byte-level tokenizers attach to word-initial pieces.
    """
    s, e = char_span
    if e <= s:
        raise AlignmentError(f"empty target span {char_span}")
    hits = []
    for k, (_, (ts, te)) in enumerate(tokenization):
        ts, te = _trimmed(sentence, ts, te)
        if ts < te and ts < e and te > s:
            hits.append(k)
    if not hits:
        raise AlignmentError(f"no subtoken overlaps {sentence[s:e]!r} at {char_span}")
    return hits[0], hits[-1] + 1


def pool_subwords(vectors) -> np.ndarray:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError(f"need a non-empty (k, H) block, got shape {vectors.shape}")
    return vectors.mean(axis=0)


# --------------------------------------------------------------------------
# encoder handle


@dataclass
class Encoding:
    ids: list[int]
    tokens: list[str]
    offsets: list[tuple[int, int]]
    special: list[bool]

    def table(self):
        return list(zip(self.tokens, self.offsets))


class EncoderHandle:
    """A frozen Hugging Face encoder with a fast (offset-aware) tokenizer."""

    inference_only = True

    def __init__(self, model_id: str, tokenizer, model):
        self.model_id = model_id
        self.tokenizer = tokenizer
        self.model = model.eval()
        if not getattr(tokenizer, "is_fast", False):
            raise CapabilityError(f"{model_id}: a fast tokenizer is required for character offsets")
        cfg = model.config
        self.n_layers = int(cfg.num_hidden_layers)
        self.hidden_size = int(cfg.hidden_size)
        if tokenizer.unk_token is not None:
            self.unk_symbol, self.unk_source = tokenizer.unk_token, "unk"
        elif tokenizer.mask_token is not None:
            self.unk_symbol, self.unk_source = tokenizer.mask_token, "mask"
            log.warning("%s has no unknown token; UNK mode substitutes %s", model_id, self.unk_symbol)
        else:
            raise CapabilityError(f"{model_id}: tokenizer has neither an unknown nor a mask token")
        self.unk_id = tokenizer.convert_tokens_to_ids(self.unk_symbol)
        if not isinstance(self.unk_id, int):
            raise CapabilityError(f"{model_id}: {self.unk_symbol!r} is not a single vocabulary id")
        limit = getattr(tokenizer, "model_max_length", None) or 512
        pos = getattr(cfg, "max_position_embeddings", limit)
        # RoBERTa-style models reserve position ids for padding
        if getattr(cfg, "model_type", "") in ("roberta", "xlm-roberta", "camembert"):
            pos -= 2
        self.max_length = int(min(limit, pos))
        self._tok_version = None

    @classmethod
    def load(cls, model_id: str) -> "EncoderHandle":
        try:
            from transformers import AutoModel, AutoTokenizer
            from transformers.utils import logging as hf_logging

            hf_logging.disable_progress_bar()
            tok = AutoTokenizer.from_pretrained(model_id, use_fast=True)
            model = AutoModel.from_pretrained(model_id)
        except Exception as exc:  # network, missing files, bad ids
            raise ResourceError(f"cannot load {model_id!r}: {exc}") from exc
        return cls(model_id, tok, model)

    @property
    def tokenizer_version(self) -> str:
        if self._tok_version is None:
            import transformers

            vocab = self.tokenizer.get_vocab()
            h = hashlib.sha256()
            for tok, i in sorted(vocab.items(), key=lambda kv: kv[1]):
                h.update(f"{i}\t{tok}\n".encode("utf-8"))
            self._tok_version = f"{type(self.tokenizer).__name__}/{transformers.__version__}/{h.hexdigest()[:16]}"
        return self._tok_version

    def weights_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:32]

    def encode(self, text: str) -> Encoding:
        enc = self.tokenizer(text, return_offsets_mapping=True, return_special_tokens_mask=True,
                             add_special_tokens=True)
        ids = list(enc["input_ids"])
        return Encoding(ids, self.tokenizer.convert_ids_to_tokens(ids),
                        [tuple(o) for o in enc["offset_mapping"]],
                        [bool(m) for m in enc["special_tokens_mask"]])

    def hidden_states(self, ids: Sequence[int]) -> np.ndarray:
        """(n_layers + 1, len(ids), hidden) hidden states for one sequence."""
        import torch

        with torch.inference_mode():
            out = self.model(input_ids=torch.tensor([list(ids)]),
                             attention_mask=torch.ones(1, len(ids), dtype=torch.long),
                             output_hidden_states=True)
        return np.stack([h[0].float().cpu().numpy() for h in out.hidden_states])


def substitute_unknown(sentence: str, char_span, encoder) -> tuple[list[int], tuple[int, int]]:
    """Token ids with the target subtokens collapsed into one unknown token."""
    if getattr(encoder, "unk_id", None) is None:
        raise CapabilityError("encoder vocabulary has no unknown token")
    enc = encoder.encode(sentence)
    i, j = align_target(sentence, char_span, enc.table())
    return enc.ids[:i] + [encoder.unk_id] + enc.ids[j:], (i, i + 1)


def substituted_text(sentence: str, char_span, encoder) -> tuple[str, tuple[int, int]]:
    """Sentence with the target characters replaced by the unknown symbol, plus its new span."""
    s, e = char_span
    text = sentence[:s] + encoder.unk_symbol + sentence[e:]
    return text, (s, s + len(encoder.unk_symbol))


def _truncate(ids, special, rng, max_length):
    """Window of content tokens centred on the target, keeping the boundary specials."""
    if len(ids) <= max_length:
        return list(ids), rng
    head = 1 if special and special[0] else 0
    tail = 1 if special and special[-1] else 0
    room = max_length - head - tail
    content = ids[head:len(ids) - tail]
    i, j = rng[0] - head, rng[1] - head
    centre = (i + j) // 2
    start = max(0, min(centre - room // 2, len(content) - room))
    start = min(start, i)
    window = content[start:start + room]
    if j - start > room:
        raise AlignmentError("target longer than the model window")
    return ids[:head] + window + ids[len(ids) - tail:], (i - start + head, j - start + head)


def extract_embeddings(encoder: EncoderHandle, instance: ConstructionInstance,
                       target: TargetSpec | str) -> LayerEmbeddingSet:
    if isinstance(target, str):
        target = TargetSpec.for_instance(instance, target)
    target.check(instance)
    enc = encoder.encode(instance.sentence)
    rng = align_target(instance.sentence, target.char_span, enc.table())
    ids, special = enc.ids, enc.special
    if target.mode == UNK:
        ids = ids[:rng[0]] + [encoder.unk_id] + ids[rng[1]:]
        special = special[:rng[0]] + [False] + special[rng[1]:]
        rng = (rng[0], rng[0] + 1)
    if len(ids) > encoder.max_length:
        log.info("%s: %d tokens, truncating to %d around the target", instance.id, len(ids), encoder.max_length)
        ids, rng = _truncate(ids, special, rng, encoder.max_length)
    states = encoder.hidden_states(ids)
    matrix = states[:, rng[0]:rng[1], :].mean(axis=1)
    fp = extraction_fingerprint(encoder.model_id, encoder.tokenizer_version, target.mode,
                                instance.sentence, target.char_span)
    meta = {"n_subtokens": rng[1] - rng[0]}
    if target.mode == UNK:
        meta["unk_symbol"] = encoder.unk_symbol
        meta["unk_source"] = encoder.unk_source
    return LayerEmbeddingSet(instance.id, target.mode, matrix, encoder.model_id, fp, meta)


def expected_fingerprint(encoder: EncoderHandle, instance: ConstructionInstance, mode: str) -> str:
    return extraction_fingerprint(encoder.model_id, encoder.tokenizer_version, mode,
                                  instance.sentence, instance.prep_char_span())


# --------------------------------------------------------------------------
# cache


def _key(model_id: str, mode: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", model_id).strip("_") + "__" + mode


class EmbeddingStore:
    """Append-only dense store; see the module docstring for the byte layout.

    Writes go straight to the data file; the index is rewritten on
    :meth:`flush` (and on context exit), so keep one writer per file.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index = {}
        self._dirty = set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.flush()

    def paths(self, model_id, mode):
        k = _key(model_id, mode)
        return self.root / f"{k}.f32", self.root / f"{k}.index.json"

    def index(self, model_id, mode) -> dict | None:
        key = (model_id, mode)
        if key not in self._index:
            _, ipath = self.paths(model_id, mode)
            if not ipath.exists():
                return None
            idx = json.loads(ipath.read_text(encoding="utf-8"))
            idx["pos"] = {i: k for k, i in enumerate(idx["ids"])}
            self._index[key] = idx
        return self._index[key]

    def write(self, s: LayerEmbeddingSet) -> None:
        dpath, _ = self.paths(s.model_id, s.mode)
        idx = self.index(s.model_id, s.mode)
        if idx is None:
            idx = {"model_id": s.model_id, "mode": s.mode, "n_rows": s.matrix.shape[0],
                   "hidden": s.matrix.shape[1], "dtype": "<f4", "ids": [], "fingerprints": [],
                   "crc32": [], "pos": {}}
            self._index[(s.model_id, s.mode)] = idx
            dpath.write_bytes(b"")
        if s.matrix.shape != (idx["n_rows"], idx["hidden"]):
            raise ValueError(f"shape {s.matrix.shape} does not match cache {(idx['n_rows'], idx['hidden'])}")
        data = s.matrix.astype("<f4").tobytes(order="C")
        crc = zlib.crc32(data)
        if s.instance_id in idx["pos"]:
            k = idx["pos"][s.instance_id]
            with open(dpath, "r+b") as fh:
                fh.seek(k * len(data))
                fh.write(data)
            idx["fingerprints"][k] = s.extraction_fingerprint
            idx["crc32"][k] = crc
        else:
            with open(dpath, "ab") as fh:
                fh.write(data)
            idx["pos"][s.instance_id] = len(idx["ids"])
            idx["ids"].append(s.instance_id)
            idx["fingerprints"].append(s.extraction_fingerprint)
            idx["crc32"].append(crc)
        self._dirty.add((s.model_id, s.mode))

    def flush(self) -> None:
        for key in sorted(self._dirty):
            idx = self._index[key]
            _, ipath = self.paths(*key)
            body = {k: v for k, v in idx.items() if k != "pos"}
            tmp = ipath.with_suffix(".tmp")
            tmp.write_text(json.dumps(body), encoding="utf-8")
            tmp.replace(ipath)
        self._dirty.clear()

    def _array(self, model_id, mode):
        idx = self.index(model_id, mode)
        dpath, _ = self.paths(model_id, mode)
        n = len(idx["ids"])
        return np.memmap(dpath, dtype="<f4", mode="r", shape=(n, idx["n_rows"], idx["hidden"]))

    def contains(self, instance_id, mode, model_id, fingerprint=None) -> bool:
        idx = self.index(model_id, mode)
        if idx is None or instance_id not in idx["pos"]:
            return False
        return fingerprint is None or idx["fingerprints"][idx["pos"][instance_id]] == fingerprint

    def read(self, instance_id, mode, model_id, fingerprint=None) -> LayerEmbeddingSet:
        idx = self.index(model_id, mode)
        if idx is None or instance_id not in idx["pos"]:
            raise CacheMiss(f"{instance_id} ({model_id}, {mode}) not cached")
        if idx["model_id"] != model_id:
            raise StaleCacheError(f"cache file belongs to {idx['model_id']!r}, not {model_id!r}")
        k = idx["pos"][instance_id]
        stored = idx["fingerprints"][k]
        if fingerprint is not None and stored != fingerprint:
            raise StaleCacheError(f"{instance_id}: cached fingerprint {stored} != expected {fingerprint}")
        row = np.array(self._array(model_id, mode)[k])
        if zlib.crc32(row.astype("<f4").tobytes()) != idx["crc32"][k]:
            raise CorruptCacheError(f"{instance_id}: checksum mismatch in {self.paths(model_id, mode)[0]}")
        return LayerEmbeddingSet(instance_id, mode, row, model_id, stored)

    def read_layer(self, model_id, mode, layer: int, ids=None) -> tuple[list[str], np.ndarray]:
        """(ids, n x hidden) slice of one layer without loading full matrices."""
        idx = self.index(model_id, mode)
        if idx is None:
            raise CacheMiss(f"nothing cached for ({model_id}, {mode})")
        arr = self._array(model_id, mode)
        if ids is None:
            ids = list(idx["ids"])
        missing = [i for i in ids if i not in idx["pos"]]
        if missing:
            raise CacheMiss(f"{len(missing)} ids missing for ({model_id}, {mode}): {missing[:5]}")
        rows = [idx["pos"][i] for i in ids]
        return list(ids), np.array(arr[rows, layer, :])

    def read_many(self, ids, mode, model_id) -> np.ndarray:
        """(n, n_layers + 1, hidden) block for ``ids`` in the given order."""
        idx = self.index(model_id, mode)
        if idx is None:
            raise CacheMiss(f"nothing cached for ({model_id}, {mode})")
        missing = [i for i in ids if i not in idx["pos"]]
        if missing:
            raise CacheMiss(f"{len(missing)} ids missing for ({model_id}, {mode}): {missing[:5]}")
        return np.array(self._array(model_id, mode)[[idx["pos"][i] for i in ids]])

    def __len__(self):
        n = 0
        for ipath in self.root.glob("*.index.json"):
            n += len(json.loads(ipath.read_text(encoding="utf-8"))["ids"])
        return n


def cache_write(s: LayerEmbeddingSet, store: EmbeddingStore) -> None:
    store.write(s)
    store.flush()


def cache_read(instance_id, mode, model_id, store: EmbeddingStore, fingerprint=None) -> LayerEmbeddingSet:
    return store.read(instance_id, mode, model_id, fingerprint)
