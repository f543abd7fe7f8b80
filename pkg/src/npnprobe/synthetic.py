"""Synthetic corpora and feature fixtures shaped like the Italian NPN data.

The real dataset is distributed separately; these generators give every
stage of the pipeline something realistic to chew on (lemma overlap across
labels, heavy-tailed lemma frequencies, all eight distractor types).
"""

from __future__ import annotations

import random
import re
from collections import Counter
from pathlib import Path

import numpy as np

from .corpus import AnnotationRecord, ConstructionInstance, SemanticLabel, normalize
from .splitter import task_label

SUCC = SemanticLabel.SUCCESSION.value
ACCU = SemanticLabel.ACCUMULATION.value
JUXT = SemanticLabel.JUXTAPOSITION.value

NOUNS = [
    ("strato", "strati"), ("porta", "porte"), ("gomito", "gomiti"), ("petto", "petti"),
    ("fronte", "fronti"), ("balcone", "balconi"), ("uscio", "usci"), ("faccia", "facce"),
    ("casa", "case"), ("goccia", "gocce"), ("passo", "passi"), ("giorno", "giorni"),
    ("anno", "anni"), ("mese", "mesi"), ("pagina", "pagine"), ("riga", "righe"),
    ("libro", "libri"), ("mattone", "mattoni"), ("pietra", "pietre"), ("piano", "piani"),
    ("bandiera", "bandiere"), ("agenzia", "agenzie"), ("irritazione", "irritazioni"),
    ("donna", "donne"), ("uomo", "uomini"), ("spalla", "spalle"), ("bocca", "bocche"),
    ("mano", "mani"), ("cuore", "cuori"), ("guancia", "guance"), ("testa", "teste"),
    ("corpo", "corpi"), ("paese", "paesi"), ("città", "città"), ("strada", "strade"),
    ("foglio", "fogli"), ("errore", "errori"), ("debito", "debiti"), ("bugia", "bugie"),
    ("menzogna", "menzogne"), ("sacrificio", "sacrifici"), ("lettera", "lettere"),
    ("parola", "parole"), ("scatola", "scatole"), ("pezzo", "pezzi"), ("tappa", "tappe"),
    ("villaggio", "villaggi"), ("negozio", "negozi"), ("quartiere", "quartieri"),
    ("collina", "colline"), ("onda", "onde"), ("nuvola", "nuvole"), ("debolezza", "debolezze"),
    ("problema", "problemi"), ("domanda", "domande"), ("ora", "ore"), ("minuto", "minuti"),
    ("secolo", "secoli"), ("generazione", "generazioni"), ("piede", "piedi"),
]
NUMERALS = ["zero", "uno", "due", "tre", "quattro", "cinque", "sei", "sette", "otto", "dieci"]
NAMES = ["Arezzo", "Siena", "Lucca", "Modena", "Parma", "Pavia", "Trento", "Udine", "Lecce", "Prato"]

_SYL = ["ba", "ce", "di", "fo", "gu", "la", "me", "ni", "po", "ru", "sa", "te", "vi", "zo", "ma", "ri"]


def noun_pool(n: int, seed: int = 0) -> list[tuple[str, str]]:
    """``n`` (singular, plural) pairs: real nouns first, then pseudo-words."""
    pool = list(NOUNS[:n])
    rng = random.Random(f"nouns|{seed}")
    seen = {s for s, _ in pool}
    while len(pool) < n:
        stem = "".join(rng.choice(_SYL) for _ in range(rng.randint(2, 3)))
        if rng.random() < 0.5:
            sg, pl = stem + "lo", stem + "li"
        else:
            sg, pl = stem + "ta", stem + "te"
        if sg not in seen:
            seen.add(sg)
            pool.append((sg, pl))
    return pool


_PREFIX = ["Qui lavorano i revisori", "Ogni sera si sentiva", "Nel racconto cresceva",
           "Durante la gara avanzavano", "In quella stagione si vedeva", "Il vecchio ricordava",
           "Per tutta la notte andavano", "Secondo il giornale crescevano"]
_SUFFIX = ["con i membri della squadra.", "senza mai fermarsi davvero.", "lungo tutta la valle.",
           "fino alla fine del viaggio.", "come accadeva ogni anno.", "sotto gli occhi di tutti."]


def _build(iid, parts, span_parts, **kw):
    """Join ``parts``; the span covers the words listed by index in ``span_parts``."""
    text, offsets = "", []
    for k, p in enumerate(parts):
        if k:
            text += " "
        offsets.append((len(text), len(text) + len(p)))
        text += p
    start, end = offsets[span_parts[0]][0], offsets[span_parts[-1]][1]
    return ConstructionInstance(id=iid, sentence=text, span=(start, end), **kw)


def _cxn(iid, rng, lemma, form, prep, number, label, lang="it"):
    pre = rng.choice(_PREFIX).split()
    post = rng.choice(_SUFFIX).split()
    parts = pre + [form, prep, form] + post
    k = len(pre)
    return _build(iid, parts, [k, k + 2], prep=prep, noun_lemma=lemma, noun_form=form,
                  number=number, cls="CXN", semantic_label=label, language=lang)


def _distractor(iid, rng, dtype, sg, pl):
    kw = dict(cls="DISTRACTOR", semantic_label="none", distractor_type=dtype)
    if dtype == "PNPN":
        p = "ad" if sg[0] in "aeiou" else "a"
        parts = ["Il", "tutto", "avviene", "con", "una", "successione", "da", sg, p, sg, "quasi", "automatica."]
        return _build(iid, parts, [6, 9], prep="a", noun_lemma=sg, noun_form=sg, number="singular", **kw)
    if dtype == "VERBAL":
        parts = ["Quel", "fatto", "aggiunse", sg, "a", sg, "senza", "alcun", "riguardo."]
        return _build(iid, parts, [3, 5], prep="a", noun_lemma=sg, noun_form=sg, number="singular", **kw)
    if dtype in ("NUM_P_NUM_A", "NUM_P_NUM_SU"):
        num = rng.choice(NUMERALS)
        if dtype == "NUM_P_NUM_A":
            parts = ["Il", "risultato", "restava", "sempre", "sullo", num, "a", num, "nel", "secondo", "tempo."]
            return _build(iid, parts, [5, 7], prep="a", noun_lemma=num, noun_form=num, number="singular", **kw)
        parts = ["Per", "fortuna", "sono", "stati", "approvati", num, "su", num, "dal", "consiglio", "comunale."]
        return _build(iid, parts, [5, 7], prep="su", noun_lemma=num, noun_form=num, number="singular", **kw)
    if dtype == "N_EXTENDED":
        prep = rng.choice(["a", "su"])
        parts = ["Le", "telecamere", "alternavano", "primi", pl, prep, pl, "di", "figura", "intera."]
        return _build(iid, parts, [3, 6], prep=prep, noun_lemma=sg, noun_form=pl, number="plural", **kw)
    if dtype == "PROPER_NAME":
        name = rng.choice(NAMES)
        parts = ["La", "posizione", "del", "Comune", "di", name, "su", name, "Fiere", "è", "chiarissima."]
        return _build(iid, parts, [5, 7], prep="su", noun_lemma=name, noun_form=name, number="singular", **kw)
    if dtype == "N_SU_N_GIU":
        parts = ["Serve", "una", "voce", "che", "dica", pl, "su", pl, "giù", "ogni", "mattina."]
        return _build(iid, parts, [5, 8], prep="su", noun_lemma=sg, noun_form=pl, number="plural", **kw)
    if dtype == "THEMATIC_TARGET":
        parts = ["Sono", "tre", "autrici", "che", "scrivono", "per", pl, "su", pl, "da", "molti", "anni."]
        return _build(iid, parts, [6, 8], prep="su", noun_lemma=sg, noun_form=pl, number="plural", **kw)
    raise ValueError(dtype)


# (label, prep, number, n_lemmas, per-lemma count range)
CXN_PLAN = [
    (SUCC, "a", "singular", 21, (6, 26)),
    (JUXT, "a", "singular", 27, (6, 26)),
    (SUCC, "su", "singular", 71, (1, 5)),
    (ACCU, "su", "plural", 120, (1, 5)),
]
DISTRACTOR_PLAN = {
    "PNPN": 150, "VERBAL": 120, "NUM_P_NUM_A": 60, "N_EXTENDED": 120,
    "PROPER_NAME": 80, "N_SU_N_GIU": 40, "NUM_P_NUM_SU": 80, "THEMATIC_TARGET": 150,
}


def npn_corpus(seed: int = 0, per_dopo: int = 50, scale: float = 1.0) -> list[ConstructionInstance]:
    """A corpus with the composition of the filtered Italian dataset.

    ``scale`` shrinks every count (for quick fixtures); ``per_dopo`` is the
    number of succession instances per unseen preposition.
    """
    rng = random.Random(f"corpus|{seed}")
    pool = noun_pool(400, seed)
    out = []
    n = 0

    def next_id():
        nonlocal n
        n += 1
        return f"s{n:05d}"

    for label, prep, number, n_lemmas, (lo, hi) in CXN_PLAN:
        lemmas = rng.sample(pool, max(1, round(n_lemmas * scale)))
        for sg, pl in lemmas:
            form = sg if number == "singular" else pl
            for _ in range(max(1, round(rng.randint(lo, hi) * scale))):
                out.append(_cxn(next_id(), rng, sg, form, prep, number, label))
    succ_lemmas = sorted({i.noun_lemma for i in out if i.semantic_label == SUCC})
    for prep in ("per", "dopo"):
        for k in range(per_dopo):
            # a third reuse a/su succession lemmas so disjointness crosses prepositions
            if k % 3 == 0 and succ_lemmas:
                sg = rng.choice(succ_lemmas)
            else:
                sg = rng.choice(pool)[0]
            out.append(_cxn(next_id(), rng, sg, sg, prep, "singular", SUCC))
    for dtype, count in DISTRACTOR_PLAN.items():
        for _ in range(max(1, round(count * scale))):
            sg, pl = rng.choice(pool[:150])
            out.append(_distractor(next_id(), rng, dtype, sg, pl))
    return out


def small_corpus(n: int = 200, seed: int = 0) -> list[ConstructionInstance]:
    """Balanced toy corpus for identification/disambiguation smoke runs.

    Half constructions (succession/accumulation/juxtaposition spread over
    ``a`` and ``su``), half distractors.
    """
    rng = random.Random(f"small|{seed}")
    pool = noun_pool(80, seed)
    out = []
    plan = [(SUCC, "a", "singular"), (SUCC, "su", "singular"), (ACCU, "su", "plural"), (JUXT, "a", "singular")]
    for k in range(n // 2):
        label, prep, number = plan[k % 4]
        sg, pl = pool[rng.randrange(len(pool))]
        out.append(_cxn(f"c{k:04d}", rng, sg, sg if number == "singular" else pl, prep, number, label))
    a_types = ["PNPN", "VERBAL", "NUM_P_NUM_A"]
    su_types = ["THEMATIC_TARGET", "N_SU_N_GIU", "NUM_P_NUM_SU"]
    for k in range(n - n // 2):
        dtype = (a_types if k % 2 == 0 else su_types)[(k // 2) % 3]
        sg, pl = pool[rng.randrange(len(pool))]
        out.append(_distractor(f"d{k:04d}", rng, dtype, sg, pl))
    return out


def layer_features(corpus, task: str, n_layers: int = 12, hidden: int = 32, seed: int = 0,
                   signal=None) -> dict[str, np.ndarray]:
    """Per-instance ``(n_layers + 1, hidden)`` matrices with a class signal.

    ``signal[l]`` scales the class-mean offset at layer ``l``; by default it
    ramps from 0 at the input layer to 3 at the top. Instances with no label
    for ``task`` get pure noise.
    """
    rng = np.random.default_rng(seed)
    if signal is None:
        signal = np.linspace(0.0, 3.0, n_layers + 1)
    labels = sorted({l for l in (task_label(i, task) for i in corpus) if l is not None})
    means = rng.normal(size=(len(labels), hidden))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    out = {}
    for inst in corpus:
        m = rng.normal(size=(n_layers + 1, hidden))
        label = task_label(inst, task)
        if label is not None:
            m += np.outer(signal, means[labels.index(label)])
        out[inst.id] = m.astype(np.float32)
    return out


def annotation_table(n_items: int = 100, n_annotators: int = 5, error_rate: float = 0.08,
                     seed: int = 0) -> list[AnnotationRecord]:
    """Simulated cross-annotation: each annotator copies a gold label, erring at ``error_rate``.

    Errors prefer the adjacent succession/accumulation pair.
    """
    rng = random.Random(f"ann|{seed}")
    labels = [SUCC, ACCU, JUXT, SUCC]
    gold = [labels[k % 4] for k in range(n_items)]
    recs = []
    for a in range(n_annotators):
        for k, g in enumerate(gold):
            lab = g
            if rng.random() < error_rate:
                if g in (SUCC, ACCU) and rng.random() < 0.6:
                    lab = ACCU if g == SUCC else SUCC
                else:
                    lab = rng.choice([l for l in (SUCC, ACCU, JUXT) if l != g])
            recs.append(AnnotationRecord(f"i{k:03d}", f"ann{a}", lab))
    return recs


def composition(corpus) -> Counter:
    return Counter((i.cls, i.semantic_label, normalize(i.prep), i.distractor_type) for i in corpus)


def tiny_bert(path, texts, n_layers: int = 2, hidden: int = 32, seed: int = 0,
              drop_words=(), extra_pieces=(), max_positions: int = 128):
    """Save a randomly initialised BERT whose vocabulary covers ``texts``.

    Words in ``drop_words`` are left out so the tokenizer has to split them
    into the pieces listed in ``extra_pieces`` (or single characters).
    Returns the directory, loadable with :meth:`EncoderHandle.load`.
    """
    import torch
    from transformers import BertConfig, BertModel, BertTokenizerFast
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    words = set()
    for t in texts:
        words.update(re.findall(r"\w+|[^\w\s]", t))
    words -= set(drop_words)
    chars = sorted({c for w in list(words) + list(drop_words) + list(extra_pieces) for c in w})
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += sorted(words) + sorted(set(extra_pieces) - words)
    vocab += [c for c in chars if c not in vocab] + ["##" + c for c in chars]
    tok = BertTokenizerFast(vocab={w: i for i, w in enumerate(vocab)}, do_lower_case=False,
                            tokenize_chinese_chars=False, strip_accents=False)
    tok.model_max_length = max_positions
    tok.save_pretrained(path)
    torch.manual_seed(seed)
    config = BertConfig(vocab_size=len(vocab), hidden_size=hidden, num_hidden_layers=n_layers,
                        num_attention_heads=2, intermediate_size=2 * hidden,
                        max_position_embeddings=max_positions, initializer_range=0.3)
    model = BertModel(config)
    model.save_pretrained(path)
    return path


def tiny_fasttext(path, words, dim: int = 16, bucket: int = 2000, seed: int = 0, minn: int = 3, maxn: int = 5):
    """Random fastText-format binary covering ``words`` (plus n-gram buckets)."""
    from .staticvec import save_fasttext_bin

    rng = np.random.default_rng(seed)
    words = sorted(set(words))
    save_fasttext_bin(path, words, rng.normal(size=(len(words), dim)), rng.normal(size=(bucket, dim)),
                      minn=minn, maxn=maxn)
    return Path(path)


SMOKE_CONFIGURATIONS = [
    {"name": "SMOKE_ID", "task": "identification", "n_splits": 5, "seed": 0,
     "decremental_sizes": [120, 60],
     "quotas": {"train": {"CXN": {"a": 30, "su": 30}, "DISTRACTOR": {"a": 30, "su": 30}},
                "test": {"CXN": {"a": 8, "su": 8}, "DISTRACTOR": {"a": 8, "su": 8}}}},
    {"name": "SMOKE_DISAMBIG", "task": "disambiguation", "n_splits": 5, "seed": 0,
     "decremental_sizes": [60, 30],
     "quotas": {"train": {SUCC: {"a": 10, "su": 10}, ACCU: {"su": 20}, JUXT: {"a": 20}},
                "test": {SUCC: {"a": 4, "su": 4}, ACCU: {"su": 4}, JUXT: {"a": 4}}}},
]


def smoke_experiment(root, n: int = 200, seed: int = 0) -> Path:
    """Write a self-contained experiment (corpus, tiny encoder, vectors, YAML) under ``root``.

    Returns the path of the experiment file.
    """
    import yaml

    from .corpus import write_corpus

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    corpus = small_corpus(n, seed)
    write_corpus(corpus, root / "corpus.tsv")
    if not (root / "encoder" / "config.json").exists():
        tiny_bert(root / "encoder", [i.sentence for i in corpus], seed=seed)
    tiny_fasttext(root / "vectors.bin", [w for i in corpus for w in (i.noun_lemma, i.noun_form)], seed=seed)
    exp = {
        "corpus": "corpus.tsv",
        "configurations": SMOKE_CONFIGURATIONS,
        "models": ["encoder"],
        "modes": ["UNK", "PREP"],
        "static_tables": [{"path": "vectors.bin", "id": "fasttext-tiny"}],
        "seeds": {"split": seed, "filter": seed, "probe": seed, "pca": seed},
        "cache_dir": "cache",
        "output_dir": "out",
        "pca_subset": 60,
    }
    path = root / "experiment.yaml"
    path.write_text(yaml.safe_dump(exp, sort_keys=False), encoding="utf-8")
    return path
