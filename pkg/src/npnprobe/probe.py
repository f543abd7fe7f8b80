"""Linear probes over frozen representations, control tasks, and the experiment grid."""

from __future__ import annotations

import json
import logging
import random
from pathlib import Path
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .corpus import Cls, ConstructionInstance, PROBED_MEANINGS
from .encoder import CacheMiss, EmbeddingStore
from .splitter import SplitAssignment, SplitConfiguration, decremental_subsets, task_label
from .staticvec import StaticVectorTable, feature_matrix

log = logging.getLogger(__name__)

STATIC_LEMMA, STATIC_FORM, CONTROL = "STATIC_LEMMA", "STATIC_FORM", "CONTROL"
CANONICAL_ORDER = (Cls.CXN.value, *PROBED_MEANINGS, Cls.DISTRACTOR.value)


class ProbeError(ValueError):
    pass


def canonical_classes(labels) -> list[str]:
    """Fixed display/index order: CXN, the three meanings, DISTRACTOR, then the rest sorted."""
    labels = set(labels)
    known = [l for l in CANONICAL_ORDER if l in labels]
    return known + sorted(labels - set(known))


@dataclass(frozen=True)
class ProbeParams:
    C: float = 1.0
    tol: float = 1e-4
    max_iter: int = 1000
    seed: int = 0
    scale: bool = True


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        return cls(X.mean(axis=0), sd)

    def transform(self, X):
        return (X - self.mean) / self.scale


def loss_and_grad(theta, X, Y, l2):
    """Mean multinomial cross-entropy plus ``l2 / 2 * ||W||^2`` (bias unpenalised).

    ``theta`` packs ``W`` (K x d) row-major followed by ``b`` (K); ``Y`` is
    one-hot (n x K). Returns the objective and its gradient in the same packing.
    """
    n, d = X.shape
    K = Y.shape[1]
    W = theta[:K * d].reshape(K, d)
    b = theta[K * d:]
    Z = X @ W.T + b
    Z -= Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Z).sum(axis=1, keepdims=True))
    logp = Z - logsum
    loss = -(Y * logp).sum() / n + 0.5 * l2 * (W * W).sum()
    R = (np.exp(logp) - Y) / n
    gW = R.T @ X + l2 * W
    gb = R.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: np.ndarray
    classes: list[str]
    params: ProbeParams
    scaler: Standardizer | None = None
    converged: bool = True

    def decision_function(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.weights.shape[1]:
            raise ProbeError(f"features have shape {X.shape}, probe expects (*, {self.weights.shape[1]})")
        if self.scaler is not None:
            X = self.scaler.transform(X)
        return X @ self.weights.T + self.bias

    def predict(self, X):
        # np.argmax keeps the lowest index on ties
        return [self.classes[k] for k in np.argmax(self.decision_function(X), axis=1)]


def train_probe(features, labels: Sequence, params: ProbeParams = ProbeParams(),
                classes: Sequence | None = None) -> ProbeModel:
    """Fit an L2-regularised multinomial logistic regression with L-BFGS.

    The objective is the mean cross-entropy plus ``||W||^2 / (2 C n)``, i.e.
    the usual ``C``-weighted formulation divided by ``n``.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise ProbeError(f"features {X.shape} do not match {len(labels)} labels")
    if not np.isfinite(X).all():
        raise ProbeError("non-finite feature values")
    classes = canonical_classes(labels) if classes is None else list(classes)
    present = set(labels)
    missing = [c for c in classes if c not in present]
    if missing:
        raise ProbeError(f"classes absent from training data: {missing}")
    unknown = present - set(classes)
    if unknown:
        raise ProbeError(f"labels outside the class list: {sorted(unknown)}")
    if len(classes) < 2:
        raise ProbeError("need at least two classes")
    n, d = X.shape
    if n < len(classes):
        raise ProbeError(f"{n} rows for {len(classes)} classes")
    scaler = Standardizer.fit(X) if params.scale else None
    if scaler is not None:
        X = scaler.transform(X)
    K = len(classes)
    index = {c: k for k, c in enumerate(classes)}
    Y = np.zeros((n, K))
    Y[np.arange(n), [index[l] for l in labels]] = 1.0
    l2 = 1.0 / (params.C * n)
    res = minimize(loss_and_grad, np.zeros(K * d + K), args=(X, Y, l2), jac=True, method="L-BFGS-B",
                   options={"maxiter": params.max_iter, "gtol": params.tol})
    if not res.success:
        log.debug("probe did not converge: %s", res.message)
    W = res.x[:K * d].reshape(K, d)
    return ProbeModel(W, res.x[K * d:], classes, params, scaler, bool(res.success))


def evaluate(model: ProbeModel, features, labels: Sequence) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix indexed ``[true][predicted]`` in ``model.classes`` order."""
    labels = list(labels)
    extra = set(labels) - set(model.classes)
    if extra:
        raise ProbeError(f"labels unknown to the probe: {sorted(extra)}")
    pred = model.predict(features)
    index = {c: k for k, c in enumerate(model.classes)}
    conf = np.zeros((len(model.classes), len(model.classes)), dtype=np.int64)
    for t, p in zip(labels, pred):
        conf[index[t], index[p]] += 1
    total = conf.sum()
    return (float(np.trace(conf) / total) if total else float("nan")), conf


# --------------------------------------------------------------------------
# control task


@dataclass
class ControlLabelMap:
    labels: dict[str, str]
    seed: int

    def __getitem__(self, lemma):
        return self.labels[lemma]

    def for_instances(self, instances) -> list[str]:
        return [self.labels[i.lemma_key] for i in instances]


def control_labels(corpus: Sequence[ConstructionInstance], task_labels: Sequence[str] | Mapping[str, str],
                   seed: int = 0, proportions: Mapping[str, float] | None = None) -> ControlLabelMap:
    """Assign every lemma one random label from the task alphabet.

    Lemmas are visited largest first (seeded random order among equal sizes)
    and each takes the label whose instance count lags furthest behind the
    task's class distribution, so the control marginals track the real ones.
    ``proportions`` replaces that distribution (e.g. with the training one
    when labelling held-out lemmas); the alphabet stays that of ``task_labels``.
    """
    if not corpus:
        raise ProbeError("empty corpus")
    if isinstance(task_labels, Mapping):
        task_labels = [task_labels[i.id] for i in corpus]
    target = Counter(task_labels)
    alphabet = canonical_classes(target)
    if proportions is not None:
        norm = sum(proportions.values())
        target = {c: proportions.get(c, 0) * len(corpus) / norm for c in alphabet}
    sizes = Counter(i.lemma_key for i in corpus)
    rng = random.Random(f"control|{seed}")
    order = sorted(sizes)
    rng.shuffle(order)
    order.sort(key=lambda l: -sizes[l])  # stable: the shuffle breaks ties
    assigned = Counter()
    out = {}
    for lemma in order:
        deficit = {c: target[c] - assigned[c] for c in alphabet}
        top = max(deficit.values())
        choice = rng.choice([c for c in alphabet if deficit[c] == top])
        out[lemma] = choice
        assigned[choice] += sizes[lemma]
    return ControlLabelMap(out, seed)


# --------------------------------------------------------------------------
# experiment grid


@dataclass
class EvalCell:
    config: str
    model_id: str
    mode: str
    feature_source: str
    layer: int | None
    split_index: int
    train_size: int
    accuracy: float
    classes: list[str]
    confusion: list[list[int]]

    @property
    def n_test(self) -> int:
        return int(np.sum(self.confusion))

    def majority_rate(self) -> float:
        rows = np.asarray(self.confusion).sum(axis=1)
        return float(rows.max() / rows.sum())

    def to_record(self) -> dict:
        d = asdict(self)
        d["confusion"] = [int(v) for v in np.asarray(self.confusion).ravel()]
        return d

    @classmethod
    def from_record(cls, d: Mapping) -> "EvalCell":
        d = dict(d)
        k = len(d["classes"])
        flat = d["confusion"]
        d["confusion"] = [list(flat[r * k:(r + 1) * k]) for r in range(k)]
        return cls(**d)


def save_cells(cells: Sequence[EvalCell], path) -> None:
    """One JSON record per cell; confusion flattened row-major."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for c in cells:
            fh.write(json.dumps(c.to_record()) + "\n")


def load_cells(path) -> list[EvalCell]:
    with open(path) as fh:
        return [EvalCell.from_record(json.loads(line)) for line in fh if line.strip()]


def _cell(config, model_id, mode, source, layer, split, train_size, model, X, y):
    acc, conf = evaluate(model, X, y)
    return EvalCell(config, model_id, mode, source, layer, split, train_size, acc,
                    list(model.classes), conf.tolist())


def run_experiment(corpus: Sequence[ConstructionInstance], config: SplitConfiguration,
                   splits: Sequence[SplitAssignment], encoders: Sequence[str] = (),
                   modes: Sequence[str] = ("UNK", "PREP"), static_tables: Sequence[StaticVectorTable] = (),
                   store: EmbeddingStore | None = None, layers: Sequence[int] | None = None,
                   train_sizes: Sequence[int] | None = None, params: ProbeParams = ProbeParams(),
                   control: bool = True, control_mode: str | None = None,
                   static_modes: Sequence[str] | None = None, features=None) -> list[EvalCell]:
    """Train and score every probe of one configuration.

    Contextual cells: one per (model, mode, layer, split, train size).
    Control cells: per (model, layer, split) on ``control_mode`` features
    (default: the first mode), scored only on test rows whose lemma never
    occurs in training. Static cells: per (table, lemma/form, split).
    ``features`` may replace the store: ``{(model_id, mode): {id: matrix}}``.
    """
    by_id = {i.id: i for i in corpus}
    if train_sizes is None:
        train_sizes = config.decremental_sizes or None
    if static_modes is None:
        static_modes = (STATIC_LEMMA,) if config.task == "identification" else (STATIC_LEMMA, STATIC_FORM)
    control_mode = control_mode or (modes[0] if modes else None)

    def block(model_id, mode, ids):
        if features is not None:
            table = features[(model_id, mode)]
            missing = [i for i in ids if i not in table]
            if missing:
                raise CacheMiss(f"{len(missing)} ids without features for ({model_id}, {mode}): {missing[:5]}")
            return np.stack([table[i] for i in ids])
        return store.read_many(ids, mode, model_id)

    # fail fast on cache gaps before any training
    needed = sorted({i for a in splits for i in (*a.train_ids, *a.test_ids)})
    for model_id in encoders:
        for mode in modes:
            block(model_id, mode, needed)

    cells = []
    for a in splits:
        train = [by_id[i] for i in a.train_ids]
        test = [by_id[i] for i in a.test_ids]
        y_train = [task_label(i, config.task) for i in train]
        y_test = [task_label(i, config.task) for i in test]
        classes = canonical_classes(y_train)
        if train_sizes:
            subsets = decremental_subsets(a, train_sizes, seed=config.seed)
        else:
            subsets = [frozenset(a.train_ids)]
        subset_rows = [np.array([k for k, i in enumerate(train) if i.id in s]) for s in subsets]

        for model_id in encoders:
            for mode in modes:
                Xtr_all = block(model_id, mode, [i.id for i in train])
                Xte_all = block(model_id, mode, [i.id for i in test])
                for layer in (range(Xtr_all.shape[1]) if layers is None else layers):
                    for rows in subset_rows:
                        yr = [y_train[k] for k in rows]
                        model = train_probe(Xtr_all[rows, layer], yr, params, classes)
                        cells.append(_cell(config.name, model_id, mode, mode, layer, a.split_index,
                                           len(rows), model, Xte_all[:, layer], y_test))

            if control and control_mode is not None:
                # test-only lemmas are labelled separately, towards the training class
                # balance, so the held-out control rows are as balanced as lemma sizes allow
                train_lemmas = {i.lemma_key for i in train}
                keep = [k for k, i in enumerate(test) if i.lemma_key not in train_lemmas]
                cseed = config.seed * 1000 + a.split_index
                cmap = control_labels(train, y_train, seed=cseed)
                if keep:
                    cmap.labels.update(control_labels([test[k] for k in keep], y_train, seed=cseed,
                                                      proportions=Counter(y_train)).labels)
                c_train = cmap.for_instances(train)
                c_test = [cmap[test[k].lemma_key] for k in keep]
                c_classes = canonical_classes(c_train)
                keep = [k for k, c in zip(keep, c_test) if c in c_classes]
                c_test = [c for c in c_test if c in c_classes]
                if len(c_classes) < 2 or not keep:
                    log.warning("split %d: control task degenerate, skipped", a.split_index)
                    continue
                Xtr_all = block(model_id, control_mode, [i.id for i in train])
                Xte_all = block(model_id, control_mode, [test[k].id for k in keep])
                for layer in (range(Xtr_all.shape[1]) if layers is None else layers):
                    model = train_probe(Xtr_all[:, layer], c_train, params, c_classes)
                    cells.append(_cell(config.name, model_id, CONTROL, control_mode, layer, a.split_index,
                                       len(train), model, Xte_all[:, layer], c_test))

        for table in static_tables:
            for smode in static_modes:
                key = "lemma" if smode == STATIC_LEMMA else "form"
                model = train_probe(feature_matrix(train, table, key), y_train, params, classes)
                cells.append(_cell(config.name, "", smode, table.source_id, None, a.split_index,
                                   len(train), model, feature_matrix(test, table, key), y_test))
    return cells


# --------------------------------------------------------------------------
# aggregation


@dataclass
class SummaryRow:
    config: str
    model_id: str
    mode: str
    feature_source: str
    layer: int | None
    train_size: int
    n_splits: int
    mean_accuracy: float
    std_accuracy: float
    classes: list[str]
    confusion: list[list[int]]
    split_indices: list[int] = field(default_factory=list)

    @property
    def key(self):
        return (self.config, self.model_id, self.mode, self.feature_source, self.layer, self.train_size)


def _sort_key(key):
    config, model_id, mode, source, layer, size = key
    return (config, model_id, mode, source, -1 if layer is None else layer, -size)


def aggregate(cells: Sequence[EvalCell]) -> list[SummaryRow]:
    """Mean/stdev accuracy and summed confusion over splits for each condition."""
    groups = defaultdict(list)
    for c in cells:
        groups[(c.config, c.model_id, c.mode, c.feature_source, c.layer, c.train_size)].append(c)
    out = []
    for key in sorted(groups, key=_sort_key):
        members = sorted(groups[key], key=lambda c: c.split_index)
        alphabets = {tuple(c.classes) for c in members}
        if len(alphabets) > 1:
            raise ProbeError(f"condition {key} mixes label alphabets {sorted(alphabets)}")
        accs = np.array([c.accuracy for c in members])
        conf = np.sum([np.asarray(c.confusion) for c in members], axis=0)
        out.append(SummaryRow(*key, len(members), float(accs.mean()), float(accs.std()),
                              list(members[0].classes), conf.tolist(), [c.split_index for c in members]))
    return out
