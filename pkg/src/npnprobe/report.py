"""Figures and tables built from aggregated probe results.

Result tables (record-lines ``.jsonl`` or tab-delimited ``.tsv``) carry the
columns of :data:`SUMMARY_FIELDS` in that order. In the tab-delimited form,
``classes`` is comma-joined, ``confusion`` is flattened row-major and
comma-joined, and an absent layer is an empty field.

PCA coordinate tables have the columns ``layer, id, label, pc1..pcK``;
the variance tables have ``layer, ratio1..ratioK``.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .probe import CONTROL, STATIC_FORM, STATIC_LEMMA, SummaryRow, canonical_classes  # noqa: E402

SUMMARY_FIELDS = tuple(f.name for f in fields(SummaryRow))
MODE_STYLE = {
    "UNK": dict(color="tab:red", marker="s"),
    "PREP": dict(color="tab:orange", marker="^"),
}
STATIC_STYLE = {STATIC_LEMMA: "--", STATIC_FORM: ":"}


class ReportError(ValueError):
    pass


def _deterministic():
    plt.rcParams["svg.hashsalt"] = "npnprobe"
    plt.rcParams["path.simplify"] = True


def _save(fig, out_path) -> list[Path]:
    """Write ``<stem>.png`` and ``<stem>.svg`` without timestamps."""
    base = Path(out_path)
    if base.suffix in (".png", ".svg"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    png, svg = base.parent / (base.name + ".png"), base.parent / (base.name + ".svg")
    fig.savefig(png, dpi=120, metadata={"Software": None})
    fig.savefig(svg, metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return [png, svg]


# --------------------------------------------------------------------------
# layer curves


@dataclass
class CurveSpec:
    """What goes into a layer-curve figure.

    ``models`` fixes the panel order (default: every contextual model in the
    summary, sorted). Train sizes are drawn from largest (darkest) to
    smallest (lightest).
    """
    config: str
    models: Sequence[str] | None = None
    modes: Sequence[str] = ("UNK", "PREP")
    train_sizes: Sequence[int] | None = None
    static: Sequence[str] = (STATIC_LEMMA, STATIC_FORM)
    control: bool = True
    title: str | None = None


def _select(summary, **match):
    return [r for r in summary if all(getattr(r, k) == v for k, v in match.items())]


def render_layer_curves(summary: Sequence[SummaryRow], curve: CurveSpec, out_path) -> list[Path]:
    """Accuracy-by-layer panels, one per model, written as PNG and SVG.

    Layer ``l`` of the hidden-state stack (0 = input embeddings) is drawn at
    x = ``l + 1``. Static baselines and the control probe are drawn as
    horizontal or grey reference lines.
    """
    rows = _select(summary, config=curve.config)
    contextual = [r for r in rows if r.mode in curve.modes and r.layer is not None]
    models = list(curve.models) if curve.models is not None else sorted({r.model_id for r in contextual})
    if not models:
        raise ReportError(f"no contextual rows for config={curve.config!r} modes={list(curve.modes)}")
    sizes = curve.train_sizes
    if sizes is None:
        sizes = sorted({r.train_size for r in contextual}, reverse=True)
    else:
        sizes = sorted(sizes, reverse=True)

    _deterministic()
    fig, axes = plt.subplots(1, len(models), figsize=(4.2 * len(models), 3.6), sharey=True, squeeze=False)
    for ax, model in zip(axes[0], models):
        n_layers = 0
        for mode in curve.modes:
            for rank, size in enumerate(sizes):
                series = sorted(_select(contextual, model_id=model, mode=mode, train_size=size),
                                key=lambda r: r.layer)
                if not series:
                    raise ReportError(f"empty series: config={curve.config!r} model={model!r} "
                                      f"mode={mode!r} train_size={size}")
                x = [r.layer + 1 for r in series]
                n_layers = max(n_layers, max(x))
                alpha = 1.0 if len(sizes) == 1 else 1.0 - 0.65 * rank / (len(sizes) - 1)
                ax.plot(x, [r.mean_accuracy for r in series], alpha=alpha, markersize=4, linewidth=1.3,
                        label=f"{mode} n={size}", **MODE_STYLE.get(mode, {}))
        if curve.control:
            ctrl = sorted(_select(rows, model_id=model, mode=CONTROL), key=lambda r: r.layer)
            if ctrl:
                ax.plot([r.layer + 1 for r in ctrl], [r.mean_accuracy for r in ctrl], color="grey",
                        linestyle="-", linewidth=1.0, label="control")
        for smode in curve.static:
            for r in _select(rows, mode=smode):
                ax.axhline(r.mean_accuracy, color="grey", linestyle=STATIC_STYLE.get(smode, "-."),
                           linewidth=1.0, label=f"{smode.lower()} ({r.feature_source})")
        ax.set_title(model, fontsize=9)
        ax.set_xlabel("layer")
        ax.set_xlim(0.5, max(n_layers, 1) + 0.5)
        ax.set_xticks(range(1, max(n_layers, 1) + 1))
        ax.tick_params(labelsize=7)
        ax.set_ylim(0.0, 1.0)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("accuracy")
    axes[0][-1].legend(fontsize=6, loc="lower right")
    fig.suptitle(curve.title or curve.config, fontsize=10)
    fig.tight_layout()
    return _save(fig, out_path)


# --------------------------------------------------------------------------
# confusion matrices


def render_confusion(matrices, labels: Sequence[str], out_path, title: str | None = None) -> list[Path]:
    """Annotated count matrices side by side (rows true, columns predicted).

    ``matrices`` is one matrix or a ``{panel title: matrix}`` mapping such as
    ``{"UNK": ..., "PREP": ...}``.
    """
    if not isinstance(matrices, Mapping):
        matrices = {"": matrices}
    labels = list(labels)
    panels = {}
    for name, m in matrices.items():
        m = np.asarray(m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ReportError(f"confusion {name!r} is not square: {m.shape}")
        if m.shape[0] != len(labels):
            raise ReportError(f"confusion {name!r} is {m.shape[0]}x{m.shape[0]} but {len(labels)} labels given")
        panels[name] = m
    order = canonical_classes(labels)
    perm = [labels.index(l) for l in order]

    _deterministic()
    k = len(order)
    fig, axes = plt.subplots(1, len(panels), figsize=(1.2 + 1.1 * k * len(panels) + 1.0, 1.2 + 1.1 * k),
                             squeeze=False)
    for ax, (name, m) in zip(axes[0], panels.items()):
        m = m[np.ix_(perm, perm)]
        ax.imshow(m, cmap="Blues", vmin=0, vmax=max(int(m.max()), 1))
        for i in range(k):
            for j in range(k):
                if i == j or m[i, j]:
                    ax.text(j, i, str(int(m[i, j])), ha="center", va="center", fontsize=8,
                            color="white" if m[i, j] > m.max() / 2 else "black")
        short = [l.split("_")[0][:10] for l in order]
        ax.set_xticks(range(k), short, fontsize=7, rotation=30)
        ax.set_yticks(range(k), short, fontsize=7)
        ax.set_xlabel("predicted", fontsize=8)
        ax.set_title(name, fontsize=9)
    axes[0][0].set_ylabel("true", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, out_path)


# --------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    layer: int
    ids: list[str]
    labels: list[str]
    coords: np.ndarray  # (n, k)
    ratios: np.ndarray  # (k,)
    components: np.ndarray  # (k, d)
    mean: np.ndarray = field(repr=False, default=None)


def balanced_subset(ids: Sequence[str], labels: Sequence[str], size: int = 360, seed: int = 0) -> list[int]:
    """Indices of an equal number of items per label (``size // K`` or the rarest label's count)."""
    by_label = {}
    for k, l in enumerate(labels):
        by_label.setdefault(l, []).append(k)
    per = min(size // len(by_label), min(len(v) for v in by_label.values()))
    chosen = []
    for l in sorted(by_label):
        idx = sorted(by_label[l], key=lambda k: ids[k])
        chosen += random.Random(f"pca|{seed}|{l}").sample(idx, per)
    return sorted(chosen)


def pca_project(embeddings, labels, layer: int, n_components: int = 3, subset: int | None = 360,
                seed: int = 0, ids: Sequence[str] | None = None) -> PCAResult:
    """Project one layer onto its leading principal axes.

    ``embeddings`` is a ``{id: (L+1, H) matrix}`` mapping (``labels`` then maps
    ids to labels) or an ``(n, L+1, H)`` / ``(n, H)`` array with parallel
    ``labels``. Axis signs are fixed so each axis' largest-magnitude loading
    is positive.
    """
    if isinstance(embeddings, Mapping):
        ids = sorted(embeddings)
        X = np.stack([np.asarray(embeddings[i])[layer] for i in ids])
        labels = [labels[i] for i in ids]
    else:
        X = np.asarray(embeddings)
        if X.ndim == 3:
            X = X[:, layer]
        labels = list(labels)
        ids = list(ids) if ids is not None else [str(k) for k in range(len(X))]
    if subset:
        keep = balanced_subset(ids, labels, subset, seed)
        X, ids, labels = X[keep], [ids[k] for k in keep], [labels[k] for k in keep]
    X = X.astype(np.float64)
    n, d = X.shape
    if min(n - 1, d) < n_components:
        raise ReportError(f"{n} points in {d} dimensions cannot span {n_components} components")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    total = float((s ** 2).sum())
    if total == 0:
        raise ReportError("all points coincide; no principal axes")
    comps = vt[:n_components]
    flip = np.sign(comps[np.arange(n_components), np.argmax(np.abs(comps), axis=1)])
    comps = comps * flip[:, None]
    ratios = s[:n_components] ** 2 / total
    return PCAResult(layer, list(ids), list(labels), Xc @ comps.T, ratios, comps, mean)


def write_coordinates(results: Sequence[PCAResult], out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    k = results[0].coords.shape[1] if results else 3
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["layer", "id", "label", *[f"pc{j + 1}" for j in range(k)]])
        for r in results:
            for i, l, c in zip(r.ids, r.labels, r.coords):
                w.writerow([r.layer, i, l, *[f"{v:.6g}" for v in c]])
    return out_path


def read_coordinates(path, variance_path=None) -> list[PCAResult]:
    """Rebuild per-layer projections from a coordinate table (ratios from the variance table if given)."""
    path = Path(path)
    if variance_path is None:
        guess = path.with_name(path.name.replace(".coords.tsv", ".variance.tsv"))
        variance_path = guess if guess != path and guess.exists() else None
    ratios = {}
    if variance_path is not None:
        with open(variance_path, newline="") as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if row[0] != "layer":
                    ratios[int(row[0])] = np.array([float(v) for v in row[1:]])
    layers = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        k = len(header) - 3
        for row in reader:
            layers.setdefault(int(row[0]), []).append(row)
    out = []
    for layer in sorted(layers):
        rows = layers[layer]
        coords = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), k)
        out.append(PCAResult(layer, [r[1] for r in rows], [r[2] for r in rows], coords,
                             ratios.get(layer, np.full(k, np.nan)), np.zeros((k, 0))))
    return out


def write_variance(results: Sequence[PCAResult], out_path) -> Path:
    out_path = Path(out_path)
    k = results[0].ratios.shape[0] if results else 3
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["layer", *[f"ratio{j + 1}" for j in range(k)]])
        for r in results:
            w.writerow([r.layer, *[f"{v:.6g}" for v in r.ratios]])
    return out_path


def render_pca(result: PCAResult, out_path, title: str | None = None) -> list[Path]:
    _deterministic()
    fig = plt.figure(figsize=(5, 4.5))
    ax = fig.add_subplot(projection="3d")
    labels = canonical_classes(result.labels)
    colors = plt.get_cmap("tab10")
    for k, l in enumerate(labels):
        m = np.array([x == l for x in result.labels])
        ax.scatter(*result.coords[m, :3].T, s=6, color=colors(k), label=l)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_zlabel("PC3")
    ax.legend(fontsize=6)
    ax.set_title(title or f"layer {result.layer + 1}", fontsize=9)
    return _save(fig, out_path)


# --------------------------------------------------------------------------
# result tables


def _tsv_value(name, v):
    if name == "classes":
        return ",".join(v)
    if name in ("confusion",):
        return ",".join(str(int(x)) for row in v for x in row)
    if name == "split_indices":
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _from_tsv(row: Mapping[str, str]) -> SummaryRow:
    classes = row["classes"].split(",") if row["classes"] else []
    flat = [int(x) for x in row["confusion"].split(",")] if row["confusion"] else []
    k = len(classes)
    return SummaryRow(
        config=row["config"], model_id=row["model_id"], mode=row["mode"], feature_source=row["feature_source"],
        layer=int(row["layer"]) if row["layer"] else None, train_size=int(row["train_size"]),
        n_splits=int(row["n_splits"]), mean_accuracy=float(row["mean_accuracy"]),
        std_accuracy=float(row["std_accuracy"]), classes=classes,
        confusion=[flat[r * k:(r + 1) * k] for r in range(k)],
        split_indices=[int(x) for x in row["split_indices"].split(",")] if row["split_indices"] else [])


def export_results(summary: Sequence[SummaryRow], format: str, out_path) -> Path:
    """Write summary rows as ``record-lines`` (JSONL) or ``delimited-table`` (TSV)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if format == "record-lines":
        with open(out_path, "w") as fh:
            for r in summary:
                d = asdict(r)
                fh.write(json.dumps({k: d[k] for k in SUMMARY_FIELDS}) + "\n")
    elif format == "delimited-table":
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(SUMMARY_FIELDS)
            for r in summary:
                w.writerow([_tsv_value(k, getattr(r, k)) for k in SUMMARY_FIELDS])
    else:
        raise ValueError(f"unknown format {format!r}")
    return out_path


def read_results(path, format: str | None = None) -> list[SummaryRow]:
    path = Path(path)
    if format is None:
        format = "delimited-table" if path.suffix == ".tsv" else "record-lines"
    if format == "record-lines":
        with open(path) as fh:
            return [SummaryRow(**json.loads(line)) for line in fh if line.strip()]
    with open(path, newline="") as fh:
        return [_from_tsv(row) for row in csv.DictReader(fh, delimiter="\t")]
