"""Seeded train/test partitions under quota tables and lemma-label disjointness.

A configuration is a quota table keyed by ``(partition, label, prep)``. The
label depends on the task: ``cls`` for identification, the semantic label for
disambiguation, and the semantic label or ``DISTRACTOR`` for the
generalization experiment. Instances sharing a ``(lemma, label)`` pair form a
group that may feed at most one partition.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .corpus import Cls, ConstructionInstance, DistractorType, SemanticLabel, normalize

log = logging.getLogger(__name__)

PARTITIONS = ("train", "test")
IDENTIFICATION = "identification"
DISAMBIGUATION = "disambiguation"
GENERALIZATION = "generalization"
TASKS = (IDENTIFICATION, DISAMBIGUATION, GENERALIZATION)

SUCC = SemanticLabel.SUCCESSION.value
ACCU = SemanticLabel.ACCUMULATION.value
JUXT = SemanticLabel.JUXTAPOSITION.value
CXN = Cls.CXN.value
DISTR = Cls.DISTRACTOR.value

# surface-isomorphic patterns vs structurally distinct constructions
ISOMORPHIC_TYPES = frozenset({
    DistractorType.THEMATIC_TARGET.value, DistractorType.N_EXTENDED.value,
    DistractorType.NUM_P_NUM_A.value, DistractorType.NUM_P_NUM_SU.value,
    DistractorType.PROPER_NAME.value,
})
CONSTRUCTION_TYPES = frozenset({
    DistractorType.PNPN.value, DistractorType.VERBAL.value, DistractorType.N_SU_N_GIU.value,
})


class InfeasibleSplitError(ValueError):
    """The corpus cannot satisfy a quota cell under the constraints."""

    def __init__(self, cell, message):
        self.cell = cell
        super().__init__(message)


def task_label(inst: ConstructionInstance, task: str) -> str | None:
    """Class label an instance carries for ``task`` (None if it does not take part)."""
    if task == IDENTIFICATION:
        return inst.cls
    if task == DISAMBIGUATION:
        return inst.semantic_label if inst.cls == CXN else None
    if task == GENERALIZATION:
        return inst.semantic_label if inst.cls == CXN else DISTR
    raise ValueError(f"unknown task {task!r}")


@dataclass
class SplitConfiguration:
    name: str
    task: str
    quotas: dict[tuple[str, str, str], int]
    allowed_distractor_types: dict[str, frozenset[str]] = field(default_factory=dict)
    n_splits: int = 5
    seed: int = 0
    train_ratio: float = 0.8
    decremental_sizes: tuple[int, ...] = ()
    declared_totals: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.quotas = {tuple(k): int(v) for k, v in self.quotas.items()}
        for (part, label, prep), n in self.quotas.items():
            if part not in PARTITIONS:
                raise ValueError(f"unknown partition {part!r}")
            if n < 0:
                raise ValueError(f"negative quota for {(part, label, prep)}")
        self.allowed_distractor_types = {
            p: frozenset(v) for p, v in self.allowed_distractor_types.items()
        }
        self.decremental_sizes = tuple(self.decremental_sizes)

    def total_discrepancies(self) -> dict[str, tuple[int, int]]:
        """partition -> (declared total, sum of cells) where the two disagree."""
        return {p: (d, self.total(p)) for p, d in sorted(self.declared_totals.items())
                if d != self.total(p)}

    def cells(self, partition: str) -> list[tuple[str, str]]:
        return [(l, p) for (part, l, p) in self.quotas if part == partition]

    def quota(self, partition: str, label: str, prep: str) -> int:
        return self.quotas.get((partition, label, prep), 0)

    def total(self, partition: str) -> int:
        return sum(n for (part, _, _), n in self.quotas.items() if part == partition)

    def allows(self, partition: str, inst: ConstructionInstance) -> bool:
        allowed = self.allowed_distractor_types.get(partition)
        if allowed is None or inst.cls != DISTR:
            return True
        return inst.distractor_type in allowed

    def replace(self, **kw) -> "SplitConfiguration":
        d = dict(name=self.name, task=self.task, quotas=dict(self.quotas),
                 allowed_distractor_types=dict(self.allowed_distractor_types),
                 n_splits=self.n_splits, seed=self.seed, train_ratio=self.train_ratio,
                 decremental_sizes=self.decremental_sizes,
                 declared_totals=dict(self.declared_totals))
        d.update(kw)
        return SplitConfiguration(**d)

    def to_dict(self) -> dict:
        quotas = {}
        for (part, label, prep), n in sorted(self.quotas.items()):
            quotas.setdefault(part, {}).setdefault(label, {})[prep] = n
        return {
            "name": self.name,
            "task": self.task,
            "quotas": quotas,
            "allowed_distractor_types": {p: sorted(v) for p, v in sorted(self.allowed_distractor_types.items())},
            "n_splits": self.n_splits,
            "seed": self.seed,
            "train_ratio": self.train_ratio,
            "decremental_sizes": list(self.decremental_sizes),
            "declared_totals": dict(sorted(self.declared_totals.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitConfiguration":
        quotas = {
            (part, label, prep): n
            for part, by_label in d["quotas"].items()
            for label, by_prep in by_label.items()
            for prep, n in by_prep.items()
        }
        return cls(
            name=d["name"], task=d["task"], quotas=quotas,
            allowed_distractor_types=d.get("allowed_distractor_types") or {},
            n_splits=d.get("n_splits", 5), seed=d.get("seed", 0),
            train_ratio=d.get("train_ratio", 0.8),
            decremental_sizes=d.get("decremental_sizes") or (),
            declared_totals=d.get("declared_totals") or {},
        )

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitConfiguration":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def _table(rows):
    quotas = {}
    for label, prep, train, test in rows:
        if train is not None:
            quotas[("train", label, prep)] = train
        if test is not None:
            quotas[("test", label, prep)] = test
    return quotas


SIMPLE = SplitConfiguration(
    name="SIMPLE", task=IDENTIFICATION,
    quotas=_table([
        (CXN, "a", 120, 30), (CXN, "su", 120, 30),
        (DISTR, "a", 120, 30), (DISTR, "su", 120, 30),
    ]),
    decremental_sizes=(480, 240, 120, 60),
    declared_totals={"train": 480, "test": 120},
)

PSEUDO = SplitConfiguration(
    name="PSEUDO", task=IDENTIFICATION,
    quotas=_table([
        (CXN, "a", 70, 30), (CXN, "su", 70, 30),
        (DISTR, "a", 25, 30), (DISTR, "su", 115, 30),
    ]),
    allowed_distractor_types={"train": ISOMORPHIC_TYPES},
    declared_totals={"train": 280, "test": 120},
)

OTHER = SplitConfiguration(
    name="OTHER", task=IDENTIFICATION,
    quotas=_table([
        (CXN, "a", 55, 30), (CXN, "su", 55, 30),
        (DISTR, "a", 105, 30), (DISTR, "su", 5, 30),
    ]),
    allowed_distractor_types={"train": CONSTRUCTION_TYPES},
    declared_totals={"train": 220, "test": 120},
)

DISAMBIG = SplitConfiguration(
    name="DISAMBIG", task=DISAMBIGUATION,
    quotas=_table([
        (SUCC, "a", 60, 15), (SUCC, "su", 60, 15),
        (ACCU, "su", 120, 30), (JUXT, "a", 120, 30),
    ]),
    decremental_sizes=(360, 240, 120, 60),
    declared_totals={"train": 360, "test": 90},
)

# the published train column sums to 240 while its caption says 360
GENERALIZE_PER_DOPO = SplitConfiguration(
    name="GENERALIZE_PER_DOPO", task=GENERALIZATION,
    quotas=_table([
        (SUCC, "a", 30, None), (SUCC, "su", 30, None),
        (SUCC, "per", None, 50), (SUCC, "dopo", None, 50),
        (ACCU, "su", 60, None), (JUXT, "a", 60, None),
        (DISTR, "a", 30, None), (DISTR, "su", 30, None),
    ]),
    declared_totals={"train": 360, "test": 100},
)

FIXTURES = {c.name: c for c in (SIMPLE, PSEUDO, OTHER, DISAMBIG, GENERALIZE_PER_DOPO)}


def get_configuration(name_or_path) -> SplitConfiguration:
    if isinstance(name_or_path, SplitConfiguration):
        return name_or_path
    if isinstance(name_or_path, Mapping):
        return SplitConfiguration.from_dict(name_or_path)
    if name_or_path in FIXTURES:
        return FIXTURES[name_or_path]
    return SplitConfiguration.load(name_or_path)


@dataclass
class SplitAssignment:
    split_index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    realized_quotas: dict[tuple[str, str, str], int]
    # (partition, label, prep) -> member ids, used for decremental subsets
    cell_members: dict[tuple[str, str, str], tuple[str, ...]] = field(default_factory=dict)

    def ids(self, partition: str) -> tuple[str, ...]:
        return self.train_ids if partition == "train" else self.test_ids

    def records(self) -> list[dict]:
        out = []
        for (part, label, prep), ids in sorted(self.cell_members.items()):
            for i in ids:
                out.append({"split_index": self.split_index, "partition": part, "id": i,
                            "label": label, "prep": prep})
        out.sort(key=lambda r: (PARTITIONS.index(r["partition"]), r["id"]))
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records():
                fh.write(json.dumps(r, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        members = defaultdict(list)
        index = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                index = r["split_index"]
                members[(r["partition"], r.get("label"), r.get("prep"))].append(r["id"])
        return cls._from_members(index or 0, members)

    @classmethod
    def _from_members(cls, split_index, members) -> "SplitAssignment":
        members = {k: tuple(sorted(v)) for k, v in members.items()}
        train = tuple(sorted(i for (p, _, _), ids in members.items() if p == "train" for i in ids))
        test = tuple(sorted(i for (p, _, _), ids in members.items() if p == "test" for i in ids))
        realized = {k: len(v) for k, v in members.items()}
        return cls(split_index, train, test, realized, members)


# --------------------------------------------------------------------------
# generation


def _groups(corpus, config):
    """(lemma, label) -> instances eligible for some cell of the configuration."""
    cells = set(config.cells("train")) | set(config.cells("test"))
    groups = defaultdict(list)
    for inst in corpus:
        label = task_label(inst, config.task)
        if label is None or (label, normalize(inst.prep)) not in cells:
            continue
        groups[(inst.lemma_key, label)].append(inst)
    for members in groups.values():
        members.sort(key=lambda i: i.id)
    return groups


def _eligible(config, partition, group_members):
    """Per-cell eligible members of one group for ``partition``."""
    out = defaultdict(list)
    for inst in group_members:
        if not config.allows(partition, inst):
            continue
        label = task_label(inst, config.task)
        key = (label, normalize(inst.prep))
        if config.quota(partition, *key) > 0:
            out[key].append(inst)
    return out


def _attempt(groups, config, rng):
    order = sorted(groups)
    rng.shuffle(order)
    elig = {p: {g: _eligible(config, p, groups[g]) for g in order} for p in PARTITIONS}
    need = {p: {c: config.quota(p, *c) for c in config.cells(p)} for p in PARTITIONS}
    supply = {p: Counter() for p in PARTITIONS}
    for p in PARTITIONS:
        for g in order:
            for c, members in elig[p][g].items():
                supply[p][c] += len(members)
    members = defaultdict(list)
    owner = {}

    def take(part, g):
        owner[g] = part
        for c, cand in elig[part][g].items():
            k = min(need[part][c], len(cand))
            if k:
                members[(part, *c)].extend(i.id for i in rng.sample(cand, k))
                need[part][c] -= k
        for p in PARTITIONS:
            for c, cand in elig[p][g].items():
                supply[p][c] -= len(cand)

    # test first: it is smaller, and a lookahead keeps enough supply for train
    for lookahead in (True, False):
        for g in order:
            if g in owner or not any(need["test"][c] > 0 for c in elig["test"][g]):
                continue
            if lookahead and any(supply["train"][c] - len(cand) < need["train"][c]
                                 for c, cand in elig["train"][g].items()):
                continue
            take("test", g)
    for g in order:
        if g in owner:
            continue
        if any(need["train"][c] > 0 for c in elig["train"][g]):
            take("train", g)

    short = [(p, *c) for p in PARTITIONS for c in config.cells(p) if need[p][c] > 0]
    return members, short, need


def _assignment(split_index, config, members) -> SplitAssignment:
    full = {(p, *c): members.get((p, *c), []) for p in PARTITIONS for c in config.cells(p)}
    return SplitAssignment._from_members(split_index, full)


def generate_splits(corpus: Sequence[ConstructionInstance], config: SplitConfiguration,
                    max_attempts: int = 200) -> list[SplitAssignment]:
    """Draw ``config.n_splits`` independent seeded partitions.

    Each split uses randomized greedy assignment of (lemma, label) groups,
    restarting with a fresh shuffle when a cell runs dry. Raises
    :class:`InfeasibleSplitError` naming the first cell that could not be
    filled.
    """
    for part, (declared, cells) in config.total_discrepancies().items():
        log.warning("%s: declared %s total %d differs from its cells (%d); using cells",
                    config.name, part, declared, cells)
    groups = _groups(corpus, config)
    for p in PARTITIONS:
        for c in config.cells(p):
            avail = sum(len(_eligible(config, p, m).get(c, ())) for m in groups.values())
            if avail < config.quota(p, *c):
                raise InfeasibleSplitError(
                    (p, *c), f"{config.name}: cell {(p, *c)} needs {config.quota(p, *c)}, "
                             f"corpus offers {avail}")
    out = []
    for k in range(config.n_splits):
        best = None
        for attempt in range(max_attempts):
            rng = random.Random(f"{config.name}|{config.seed}|{k}|{attempt}")
            members, short, need = _attempt(groups, config, rng)
            if not short:
                out.append(_assignment(k, config, members))
                break
            missing = sum(need[p][c[1:]] for p in PARTITIONS for c in short if c[0] == p)
            if best is None or missing < best[0]:
                best = (missing, short[0], need)
        else:
            cell = best[1]
            raise InfeasibleSplitError(
                cell, f"{config.name} split {k}: cell {cell} short by "
                      f"{best[2][cell[0]][cell[1:]]} after {max_attempts} attempts "
                      f"(lemma-label disjointness)")
    return out


def generalization_split(corpus: Sequence[ConstructionInstance], train_preps=("a", "su"),
                         test_preps=("per", "dopo"), seed: int = 0, split_index: int = 0,
                         base: SplitConfiguration = GENERALIZE_PER_DOPO) -> SplitAssignment:
    """Train on ``train_preps`` meanings plus distractors, test on every
    succession instance realised with ``test_preps``."""
    train_preps = {normalize(p) for p in train_preps}
    test_preps = [normalize(p) for p in test_preps]
    counts = Counter(normalize(i.prep) for i in corpus
                     if i.cls == CXN and i.semantic_label == SUCC and normalize(i.prep) in test_preps)
    if not counts:
        raise ValueError(f"no succession instances with prepositions {test_preps}")
    quotas = {k: v for k, v in base.quotas.items() if k[0] == "train" and k[2] in train_preps}
    for p in test_preps:
        if counts[p] != base.quota("test", SUCC, p):
            log.warning("generalization test cell %s: corpus has %d, %s declares %d",
                        p, counts[p], base.name, base.quota("test", SUCC, p))
        if counts[p]:
            quotas[("test", SUCC, p)] = counts[p]
    for part, (declared, cells) in base.total_discrepancies().items():
        log.warning("%s: declared %s total %d differs from its cells (%d); using cells",
                    base.name, part, declared, cells)
    config = base.replace(quotas=quotas, seed=seed, n_splits=split_index + 1, declared_totals={})
    return generate_splits(corpus, config)[split_index]


# --------------------------------------------------------------------------
# decremental training


def decremental_subsets(assignment: SplitAssignment, sizes: Sequence[int] = (480, 240, 120, 60),
                        seed: int = 0) -> list[frozenset[str]]:
    """Nested, proportionally balanced training subsets.

    Each quota cell is shuffled once; subset ``i`` takes the first
    ``cell_count * sizes[i] / sizes[0]`` ids of every cell, so the chain is
    nested by construction.
    """
    sizes = list(sizes)
    cells = {k: v for k, v in sorted(assignment.cell_members.items()) if k[0] == "train"}
    full = sum(len(v) for v in cells.values())
    if not sizes or sizes[0] != full:
        raise ValueError(f"first size must equal the train size {full}, got {sizes[:1]}")
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be strictly decreasing: {sizes}")
    for s in sizes:
        for key, ids in cells.items():
            if (len(ids) * s) % full:
                raise ValueError(f"size {s} does not divide cell {key} ({len(ids)} of {full}) evenly")
    shuffled = {}
    for key, ids in cells.items():
        order = sorted(ids)
        random.Random(f"{seed}|{assignment.split_index}|{'|'.join(key)}").shuffle(order)
        shuffled[key] = order
    return [frozenset(i for key, order in shuffled.items() for i in order[:len(order) * s // full])
            for s in sizes]


# --------------------------------------------------------------------------
# verification (kept independent of the generator on purpose)


@dataclass
class Violation:
    kind: str
    detail: str
    key: tuple = ()


@dataclass
class ConstraintReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def verify_split(corpus: Iterable[ConstructionInstance], assignment: SplitAssignment,
                 config: SplitConfiguration) -> ConstraintReport:
    """Exhaustively check one assignment; an empty report means it is valid."""
    report = ConstraintReport()
    add = lambda kind, detail, key=(): report.violations.append(Violation(kind, detail, key))
    by_id = {}
    for inst in corpus:
        by_id[inst.id] = inst

    sides = {"train": list(assignment.train_ids), "test": list(assignment.test_ids)}
    for part, ids in sides.items():
        for i, n in Counter(ids).items():
            if n > 1:
                add("duplicate-id", f"{i} appears {n} times in {part}", (part, i))
    for i in sorted(set(sides["train"]) & set(sides["test"])):
        add("duplicate-id", f"{i} in both train and test", ("both", i))

    def label_of(inst):
        if config.task == "identification":
            return inst.cls
        if config.task == "disambiguation":
            return inst.semantic_label if inst.cls == "CXN" else None
        return inst.semantic_label if inst.cls == "CXN" else "DISTRACTOR"

    pairs = {"train": set(), "test": set()}
    realized = Counter()
    for part, ids in sides.items():
        allowed = config.allowed_distractor_types.get(part)
        for i in ids:
            inst = by_id.get(i)
            if inst is None:
                add("unknown-id", f"{i} not in corpus", (part, i))
                continue
            label = label_of(inst)
            if label is None:
                add("ineligible", f"{i} has no label for task {config.task}", (part, i))
                continue
            prep = inst.prep.casefold()
            if (part, label, prep) not in config.quotas:
                add("ineligible", f"{i} falls in cell {(part, label, prep)} outside the quota table", (part, i))
            if allowed is not None and inst.cls == "DISTRACTOR" and inst.distractor_type not in allowed:
                add("distractor-type", f"{i} ({inst.distractor_type}) not allowed in {part}", (part, i))
            realized[(part, label, prep)] += 1
            pairs[part].add((inst.noun_lemma.casefold(), label))

    for lemma, label in sorted(pairs["train"] & pairs["test"]):
        add("lemma-label", f"({lemma!r}, {label}) occurs in train and test", (lemma, label))

    for key in sorted(set(config.quotas) | set(realized)):
        want, got = config.quotas.get(key, 0), realized.get(key, 0)
        if want != got:
            add("quota", f"cell {key}: expected {want}, got {got}", key)
        if assignment.realized_quotas.get(key, 0) != got:
            add("bookkeeping", f"cell {key}: assignment claims {assignment.realized_quotas.get(key, 0)}, "
                               f"recount gives {got}", key)
    return report
