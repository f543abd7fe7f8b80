"""Dataset schema, loading, validation, filtering and annotator agreement."""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class Cls(str, Enum):
    CXN = "CXN"
    DISTRACTOR = "DISTRACTOR"


class SemanticLabel(str, Enum):
    SUCCESSION = "succession_iteration_distributivity"
    ACCUMULATION = "greater_plurality_accumulation"
    JUXTAPOSITION = "juxtaposition_contact"
    CONNECTION = "connection_transition"
    IDIOSYNCRATIC = "idiosyncratic"
    NONE = "none"


class DistractorType(str, Enum):
    PNPN = "PNPN"
    VERBAL = "VERBAL"
    NUM_P_NUM_A = "NUM_P_NUM_A"
    N_EXTENDED = "N_EXTENDED"
    PROPER_NAME = "PROPER_NAME"
    N_SU_N_GIU = "N_SU_N_GIU"
    NUM_P_NUM_SU = "NUM_P_NUM_SU"
    THEMATIC_TARGET = "THEMATIC_TARGET"
    NONE = "none"


class Number(str, Enum):
    SINGULAR = "singular"
    PLURAL = "plural"


# the three meanings probed in the disambiguation experiments
PROBED_MEANINGS = (
    SemanticLabel.SUCCESSION.value,
    SemanticLabel.ACCUMULATION.value,
    SemanticLabel.JUXTAPOSITION.value,
)

COLUMNS = (
    "id", "sentence", "span_start", "span_end", "prep", "noun_lemma",
    "noun_form", "number", "cls", "semantic_label", "distractor_type",
    "language",
)
ANNOTATION_COLUMNS = ("id", "annotator_id", "label")


UNVERIFIABLE = "number unverifiable"


class CorpusSchemaError(ValueError):
    """Header is missing required columns."""


class CorpusIntegrityError(ValueError):
    """Duplicate ids or inconsistent annotation records."""


class AgreementError(ValueError):
    pass


def normalize(word: str) -> str:
    return unicodedata.normalize("NFC", word).casefold()


_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def word_tokens(text: str) -> list[str]:
    """Alphanumeric runs; splits elisions like ``dall'alto`` and punctuation."""
    return _TOKEN_RE.findall(text)


# euphonic variants: "ad agenzia" realises the preposition "a"
PREP_VARIANTS = {"a": frozenset({"a", "ad"})}


def prep_matches(token: str, prep: str) -> bool:
    prep = normalize(prep)
    return normalize(token) in PREP_VARIANTS.get(prep, frozenset({prep}))


@dataclass(frozen=True)
class ConstructionInstance:
    id: str
    sentence: str
    span: tuple[int, int]
    prep: str
    noun_lemma: str
    noun_form: str
    number: str
    cls: str
    semantic_label: str = SemanticLabel.NONE.value
    distractor_type: str = DistractorType.NONE.value
    language: str = "it"

    @property
    def span_text(self) -> str:
        return self.sentence[self.span[0]:self.span[1]]

    @property
    def lemma_key(self) -> str:
        return normalize(self.noun_lemma)

    def prep_char_span(self) -> tuple[int, int] | None:
        """Absolute character offsets of the preposition inside the span.

        For constructions the preposition sits between the two nouns, so the
        occurrence nearest the span centre is taken; distractors such as
        ``da agenzia ad agenzia`` start with an extra preposition and are
        handled the same way.
        """
        start, end = self.span
        text = self.sentence[start:end]
        hits = [m for m in _TOKEN_RE.finditer(text) if prep_matches(m.group(), self.prep)]
        if not hits:
            return None
        centre = len(text) / 2
        best = min(hits, key=lambda m: (abs((m.start() + m.end()) / 2 - centre), m.start()))
        return start + best.start(), start + best.end()

    def to_row(self) -> dict:
        row = asdict(self)
        row["span_start"], row["span_end"] = row.pop("span")
        return {k: row[k] for k in COLUMNS}


@dataclass(frozen=True)
class AnnotationRecord:
    instance_id: str
    annotator_id: str
    label: str


@dataclass
class Rejection:
    row: int
    reason: str
    instance_id: str = ""


@dataclass
class LoadResult:
    instances: list[ConstructionInstance]
    rejections: list[Rejection] = field(default_factory=list)

    def write_rejections(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rejections:
                fh.write(json.dumps({"row": r.row, "id": r.instance_id, "reason": r.reason}, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# validation


def validate_instance(
    inst: ConstructionInstance,
    number_lookup: Mapping[str, str] | Callable[[str], str | None] | None = None,
) -> list[str]:
    """Return the list of violated invariants (empty when the instance is valid).

    ``number_lookup`` maps an inflected form to ``singular``/``plural``; when it
    is absent or does not know the form, the number check is reported as
    ``unverifiable`` only if a lookup was supplied.
    """
    problems = []
    try:
        cls = Cls(inst.cls)
    except ValueError:
        problems.append(f"unknown cls {inst.cls!r}")
        cls = None
    try:
        SemanticLabel(inst.semantic_label)
    except ValueError:
        problems.append(f"unknown semantic_label {inst.semantic_label!r}")
    try:
        DistractorType(inst.distractor_type)
    except ValueError:
        problems.append(f"unknown distractor_type {inst.distractor_type!r}")
    try:
        Number(inst.number)
    except ValueError:
        problems.append(f"unknown number {inst.number!r}")

    if cls is Cls.CXN:
        if inst.semantic_label == SemanticLabel.NONE.value:
            problems.append("CXN instance without semantic_label")
        if inst.distractor_type != DistractorType.NONE.value:
            problems.append("CXN instance carries a distractor_type")
    elif cls is Cls.DISTRACTOR:
        if inst.distractor_type == DistractorType.NONE.value:
            problems.append("DISTRACTOR instance without distractor_type")

    start, end = inst.span
    if not (0 <= start < end <= len(inst.sentence)):
        problems.append(f"span {inst.span} outside sentence of length {len(inst.sentence)}")
        return problems

    tokens = word_tokens(inst.span_text)
    if not any(prep_matches(t, inst.prep) for t in tokens):
        problems.append(f"preposition {inst.prep!r} not a standalone token of span {inst.span_text!r}")

    if cls is Cls.CXN:
        problems.extend(_noun_identity(inst, tokens))

    if number_lookup is not None:
        lookup = number_lookup.get if isinstance(number_lookup, Mapping) else number_lookup
        expected = lookup(inst.noun_form)
        if expected is None:
            problems.append(f"{UNVERIFIABLE} for form {inst.noun_form!r}")
        elif expected != inst.number:
            problems.append(f"number {inst.number!r} inconsistent with form {inst.noun_form!r} ({expected})")
    return problems


def _noun_identity(inst: ConstructionInstance, tokens: list[str]) -> list[str]:
    norm = [normalize(t) for t in tokens]
    idx = [i for i, t in enumerate(tokens) if prep_matches(t, inst.prep)]
    if not idx:
        return []
    # everything left of the central preposition must mirror everything right of it
    i = min(idx, key=lambda k: (abs(k - (len(norm) - 1) / 2), k))
    left, right = norm[:i], norm[i + 1:]
    if not left or not right:
        return [f"span {inst.span_text!r} lacks a noun on both sides of {inst.prep!r}"]
    if left != right:
        return [f"noun identity violated: {' '.join(tokens[:i])!r} != {' '.join(tokens[i + 1:])!r}"]
    if len(left) == 1 and left[0] not in (normalize(inst.noun_form), inst.lemma_key):
        return [f"span noun {tokens[0]!r} matches neither noun_form nor noun_lemma"]
    return []


# --------------------------------------------------------------------------
# I/O


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def _parse_row(row: Mapping[str, str]) -> ConstructionInstance:
    return ConstructionInstance(
        id=row["id"].strip(),
        sentence=row["sentence"],
        span=(int(row["span_start"]), int(row["span_end"])),
        prep=row["prep"].strip(),
        noun_lemma=unicodedata.normalize("NFC", row["noun_lemma"].strip()),
        noun_form=unicodedata.normalize("NFC", row["noun_form"].strip()),
        number=row["number"].strip(),
        cls=row["cls"].strip(),
        semantic_label=(row["semantic_label"] or SemanticLabel.NONE.value).strip(),
        distractor_type=(row["distractor_type"] or DistractorType.NONE.value).strip(),
        language=(row["language"] or "it").strip(),
    )


def _iter_rows(path: Path, format: str):
    if format == "delimited-table":
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
        header = text.split("\n", 1)[0]
        reader = csv.DictReader(io.StringIO(text), delimiter=_sniff_delimiter(header))
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CorpusSchemaError(f"{path}: missing columns {missing}")
        for n, row in enumerate(reader, start=2):
            yield n, row
    elif format == "record-lines":
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                row = json.loads(line)
                missing = [c for c in COLUMNS if c not in row]
                if missing:
                    raise CorpusSchemaError(f"{path}:{n}: missing fields {missing}")
                yield n, {k: ("" if row[k] is None else str(row[k])) for k in COLUMNS}
    else:
        raise ValueError(f"unknown corpus format {format!r}")


def load_corpus(path, format: str = "delimited-table", number_lookup=None) -> LoadResult:
    """Read a corpus file; rows that break an invariant go to ``rejections``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    instances, rejections, seen = [], [], {}
    for n, row in _iter_rows(path, format):
        try:
            inst = _parse_row(row)
        except (ValueError, TypeError) as exc:
            rejections.append(Rejection(n, f"malformed row: {exc}", (row.get("id") or "").strip()))
            continue
        if inst.id in seen:
            raise CorpusIntegrityError(f"duplicate id {inst.id!r} (rows {seen[inst.id]} and {n})")
        seen[inst.id] = n
        problems = validate_instance(inst, number_lookup)
        for p in [p for p in problems if p.startswith(UNVERIFIABLE)]:
            log.warning("row %d (%s): %s", n, inst.id, p)
            problems.remove(p)
        if problems:
            rejections.append(Rejection(n, "; ".join(problems), inst.id))
        else:
            instances.append(inst)
    return LoadResult(instances, rejections)


def write_corpus(instances: Iterable[ConstructionInstance], path, format: str = "delimited-table") -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if format == "delimited-table":
            writer = csv.DictWriter(fh, fieldnames=COLUMNS, delimiter="\t", lineterminator="\n")
            writer.writeheader()
            for inst in instances:
                writer.writerow(inst.to_row())
        elif format == "record-lines":
            for inst in instances:
                fh.write(json.dumps(inst.to_row(), ensure_ascii=False) + "\n")
        else:
            raise ValueError(f"unknown corpus format {format!r}")


def convert_table(path, column_map: Mapping[str, str], defaults: Mapping[str, str] | None = None,
                  language: str = "en") -> list[dict]:
    """Rename the columns of a foreign delimited table into corpus rows.

    ``column_map`` maps source column -> corpus column; ``defaults`` fills
    corpus columns the source lacks. The language tag is forced to
    ``language``. The result can go straight to :func:`write_rows`.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    reader = csv.DictReader(io.StringIO(text), delimiter=_sniff_delimiter(text.split("\n", 1)[0]))
    absent = [c for c in column_map if c not in (reader.fieldnames or [])]
    if absent:
        raise CorpusSchemaError(f"{path}: source columns {absent} not found")
    rows = []
    for src in reader:
        row = {c: "" for c in COLUMNS}
        row.update(defaults or {})
        for a, b in column_map.items():
            row[b] = src[a]
        row["language"] = language
        rows.append(row)
    unfilled = [c for c in ("id", "sentence", "span_start", "span_end", "prep", "noun_lemma", "noun_form",
                            "number", "cls") if rows and not any(r[c] for r in rows)]
    if unfilled:
        raise CorpusSchemaError(f"{path}: no mapping or default for {unfilled}")
    return rows


def write_rows(rows: Iterable[Mapping[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c, "") for c in COLUMNS})


def load_annotations(path) -> list[AnnotationRecord]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    reader = csv.DictReader(io.StringIO(text), delimiter=_sniff_delimiter(text.split("\n", 1)[0]))
    missing = [c for c in ANNOTATION_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise CorpusSchemaError(f"{path}: missing columns {missing}")
    records, seen = [], set()
    for row in reader:
        rec = AnnotationRecord(row["id"].strip(), row["annotator_id"].strip(), row["label"].strip())
        key = (rec.instance_id, rec.annotator_id)
        if key in seen:
            raise CorpusIntegrityError(f"duplicate annotation {key}")
        seen.add(key)
        records.append(rec)
    return records


# --------------------------------------------------------------------------
# filtering


def filter_corpus(
    instances: Sequence[ConstructionInstance],
    min_tokens: int = 6,
    max_per_lemma_prep: int = 30,
    seed: int = 0,
) -> list[ConstructionInstance]:
    """Drop short sentences and cap each (lemma, preposition) pair.

    Over-cap groups are down-sampled with a seeded RNG; survivors keep their
    original order so an already-compliant corpus comes back unchanged.
    """
    long_enough = [i for i in instances if len(i.sentence.split()) >= min_tokens]
    groups = defaultdict(list)
    for pos, inst in enumerate(long_enough):
        groups[(inst.lemma_key, normalize(inst.prep))].append(pos)
    keep = set()
    for key in sorted(groups):
        members = groups[key]
        if len(members) <= max_per_lemma_prep:
            keep.update(members)
            continue
        rng = random.Random(f"{seed}|{key[0]}|{key[1]}")
        ordered = sorted(members, key=lambda p: long_enough[p].id)
        keep.update(rng.sample(ordered, max_per_lemma_prep))
    return [inst for pos, inst in enumerate(long_enough) if pos in keep]


# --------------------------------------------------------------------------
# agreement


def cohen_kappa(labels_a: Sequence, labels_b: Sequence) -> float:
    if len(labels_a) != len(labels_b):
        raise ValueError(f"length mismatch: {len(labels_a)} vs {len(labels_b)}")
    if not labels_a:
        raise ValueError("empty label sequences")
    n = len(labels_a)
    p_o = sum(a == b for a, b in zip(labels_a, labels_b)) / n
    ca, cb = Counter(labels_a), Counter(labels_b)
    p_e = sum(ca[k] * cb[k] for k in ca.keys() | cb.keys()) / (n * n)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def pairwise_kappas(records: Sequence[AnnotationRecord]) -> dict[tuple[str, str], float]:
    """Cohen's kappa for every annotator pair over their shared instances."""
    by_annotator = defaultdict(dict)
    for r in records:
        by_annotator[r.annotator_id][r.instance_id] = r.label
    out = {}
    for a, b in combinations(sorted(by_annotator), 2):
        shared = sorted(by_annotator[a].keys() & by_annotator[b].keys())
        if shared:
            out[(a, b)] = cohen_kappa([by_annotator[a][i] for i in shared],
                                      [by_annotator[b][i] for i in shared])
    return out


def penalty_distance(penalties: Mapping[frozenset, float] | None = None) -> Callable[[str, str], float]:
    """Nominal distance with optional reduced penalties for specific label pairs."""
    penalties = {frozenset(k): float(v) for k, v in (penalties or {}).items()}

    def delta(a, b):
        if a == b:
            return 0.0
        return penalties.get(frozenset((a, b)), 1.0)

    return delta


def adjacent_meaning_distance(penalty: float = 0.5) -> Callable[[str, str], float]:
    return penalty_distance({(SemanticLabel.SUCCESSION.value, SemanticLabel.ACCUMULATION.value): penalty})


def coincidence_matrix(records: Sequence[AnnotationRecord]) -> tuple[list[str], np.ndarray]:
    units = defaultdict(list)
    for r in records:
        units[r.instance_id].append(r.label)
    labels = sorted({r.label for r in records})
    index = {l: k for k, l in enumerate(labels)}
    o = np.zeros((len(labels), len(labels)))
    for values in units.values():
        m = len(values)
        if m < 2:
            continue
        counts = Counter(values)
        for c, nc in counts.items():
            for k, nk in counts.items():
                pairs = nc * (nk - 1) if c == k else nc * nk
                o[index[c], index[k]] += pairs / (m - 1)
    return labels, o


def krippendorff_alpha(
    records: Sequence[AnnotationRecord],
    distance: str | Callable[[str, str], float] = "nominal",
) -> float:
    """Krippendorff's alpha from the coincidence matrix.

    ``distance`` is ``"nominal"`` or a callable ``delta(label_a, label_b)`` in
    [0, 1] (see :func:`penalty_distance`).
    """
    delta = penalty_distance() if distance == "nominal" else distance
    if not callable(delta):
        raise ValueError(f"unknown distance {distance!r}")
    labels, o = coincidence_matrix(records)
    n = o.sum()
    if n == 0:
        raise AgreementError("no instance is annotated by two or more annotators")
    d = np.array([[delta(a, b) for b in labels] for a in labels])
    n_c = o.sum(axis=1)
    d_o = (o * d).sum() / n
    d_e = (np.outer(n_c, n_c) * d).sum() / (n * (n - 1))
    if d_e == 0:
        return 1.0
    return float(1.0 - d_o / d_e)


def calibrate_penalty(records: Sequence[AnnotationRecord], target_alpha: float,
                      pair=(SemanticLabel.SUCCESSION.value, SemanticLabel.ACCUMULATION.value)) -> float | None:
    """Penalty in [0, 1] for ``pair`` whose weighted alpha hits ``target_alpha``.

    Returns None when the target is outside the attainable range.
    """
    from scipy.optimize import brentq

    def f(p):
        return krippendorff_alpha(records, penalty_distance({pair: p})) - target_alpha

    lo, hi = f(0.0), f(1.0)
    if lo == 0:
        return 0.0
    if hi == 0:
        return 1.0
    if lo * hi > 0:
        return None
    return float(brentq(f, 0.0, 1.0, xtol=1e-10))


def instance_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(ConstructionInstance))
