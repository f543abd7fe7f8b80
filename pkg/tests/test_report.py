import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npnprobe.probe import CONTROL, STATIC_FORM, STATIC_LEMMA, EvalCell, aggregate
from npnprobe.report import (
    CurveSpec, ReportError, balanced_subset, export_results, pca_project, read_coordinates, read_results,
    render_confusion, render_layer_curves, render_pca, write_coordinates, write_variance,
)

SUCC, ACCU, JUXT = ("succession_iteration_distributivity", "greater_plurality_accumulation",
                    "juxtaposition_contact")
BIN = ["CXN", "DISTRACTOR"]


def n_panels(svg_path):
    return len(set(re.findall(r'<g id="axes_(\d+)"', svg_path.read_text())))


def grid_cells(models=("m1",), modes=("UNK", "PREP"), layers=13, sizes=(480, 240, 120, 60), splits=5):
    rng = np.random.default_rng(0)
    cells = []
    for m in models:
        for mode in modes:
            for layer in range(layers):
                for size in sizes:
                    for s in range(splits):
                        cells.append(EvalCell("SIMPLE", m, mode, mode, layer, s, size, float(rng.uniform()),
                                              BIN, [[50, 10], [12, 48]]))
        for layer in range(layers):
            for s in range(splits):
                cells.append(EvalCell("SIMPLE", m, CONTROL, modes[0], layer, s, sizes[0], 0.5, BIN,
                                      [[30, 30], [30, 30]]))
    for s in range(splits):
        for smode in (STATIC_LEMMA, STATIC_FORM):
            cells.append(EvalCell("SIMPLE", "", smode, "vec", None, s, sizes[0], 0.6, BIN, [[40, 20], [28, 32]]))
    return cells


# ---------------------------------------------------------------- curves

def test_four_model_panels(tmp_path):
    summary = aggregate(grid_cells(models=("a", "b", "c", "d"), splits=2))
    png, svg = render_layer_curves(summary, CurveSpec("SIMPLE"), tmp_path / "curves")
    assert png.name == "curves.png" and png.stat().st_size > 0
    assert n_panels(svg) == 4


def test_single_cell_summary(tmp_path):
    summary = aggregate([EvalCell("X", "m", "UNK", "UNK", 0, 0, 10, 0.7, BIN, [[1, 0], [0, 1]])])
    paths = render_layer_curves(summary, CurveSpec("X", modes=("UNK",)), tmp_path / "one")
    assert all(p.exists() for p in paths)


def test_rerender_is_byte_identical(tmp_path):
    summary = aggregate(grid_cells(splits=2))
    a = render_layer_curves(summary, CurveSpec("SIMPLE"), tmp_path / "a")
    b = render_layer_curves(summary, CurveSpec("SIMPLE"), tmp_path / "b")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_dotted_output_names_survive(tmp_path):
    summary = aggregate(grid_cells(splits=1, layers=2, sizes=(10,)))
    paths = render_layer_curves(summary, CurveSpec("SIMPLE"), tmp_path / "SIMPLE.curves")
    assert sorted(p.name for p in paths) == ["SIMPLE.curves.png", "SIMPLE.curves.svg"]


def test_empty_series_names_the_filter(tmp_path):
    summary = aggregate(grid_cells(splits=1, layers=2, sizes=(10,)))
    with pytest.raises(ReportError, match="train_size=99"):
        render_layer_curves(summary, CurveSpec("SIMPLE", train_sizes=[99]), tmp_path / "x")
    with pytest.raises(ReportError):
        render_layer_curves(summary, CurveSpec("NOPE"), tmp_path / "x")


# ---------------------------------------------------------------- confusion

def test_confusion_diagonal(tmp_path):
    png, svg = render_confusion(np.diag([5, 7]), BIN, tmp_path / "diag")
    assert png.exists() and n_panels(svg) == 1


def test_confusion_errors(tmp_path):
    with pytest.raises(ReportError, match="square"):
        render_confusion(np.zeros((2, 3)), BIN, tmp_path / "x")
    with pytest.raises(ReportError, match="labels"):
        render_confusion(np.zeros((3, 3)), BIN, tmp_path / "x")


def test_confusion_reorders_labels(tmp_path):
    m = np.arange(9).reshape(3, 3)
    a = render_confusion({"UNK": m, "PREP": m}, [SUCC, ACCU, JUXT], tmp_path / "a")
    perm = [2, 0, 1]  # the same matrix given in another label order
    b = render_confusion({"UNK": m[np.ix_(perm, perm)], "PREP": m[np.ix_(perm, perm)]},
                         [JUXT, SUCC, ACCU], tmp_path / "b")
    assert n_panels(a[1]) == 2
    assert a[0].read_bytes() == b[0].read_bytes()


# ---------------------------------------------------------------- PCA

def pca_oracle(X, k):
    Xc = X - X.mean(axis=0)
    vals, vecs = np.linalg.eigh(Xc.T @ Xc)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order[:k]].T, Xc


def test_planar_data_has_no_third_axis():
    rng = np.random.default_rng(0)
    X = np.zeros((50, 5))
    X[:, :2] = rng.normal(size=(50, 2)) * [3, 1]
    r = pca_project(X, ["a"] * 50, 0, subset=None)
    assert np.isclose(r.ratios[:2].sum(), 1.0) and r.ratios[2] < 1e-12


def test_against_eigendecomposition():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(360, 768)) @ np.diag(np.linspace(3, 0.1, 768))
    r = pca_project(X, ["a"] * 360, 0, subset=None)
    vals, vecs, Xc = pca_oracle(X, 3)
    assert np.allclose(r.ratios, vals[:3] / vals.sum(), atol=1e-9)
    for j in range(3):
        assert abs(abs(r.components[j] @ vecs[j]) - 1) < 1e-6
    recon_ours = r.coords @ r.components
    recon_ref = Xc @ vecs.T @ vecs
    assert np.abs(recon_ours - recon_ref).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_invariance_and_sign_rule(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 6)) * np.array([5, 3, 2, 1, 0.5, 0.2])
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = pca_project(X, ["a"] * 40, 0, subset=None)
    b = pca_project(X @ Q, ["a"] * 40, 0, subset=None)
    assert np.allclose(a.ratios, b.ratios, atol=1e-9)
    assert np.all(np.diff(a.ratios) <= 1e-12)
    for r in (a, b):
        top = r.components[np.arange(3), np.argmax(np.abs(r.components), axis=1)]
        assert np.all(top > 0)
    # coordinates agree up to the sign of each axis
    assert np.allclose(np.abs(a.coords), np.abs(b.coords), atol=1e-6)


def test_rank_errors():
    with pytest.raises(ReportError):
        pca_project(np.random.default_rng(0).normal(size=(3, 10)), ["a"] * 3, 0, subset=None)
    with pytest.raises(ReportError):
        pca_project(np.ones((10, 5)), ["a"] * 10, 0, subset=None)


def test_balanced_subset_and_mapping_input():
    ids = [f"i{k:03d}" for k in range(100)]
    labels = ["x"] * 70 + ["y"] * 30
    keep = balanced_subset(ids, labels, 40, seed=1)
    assert sorted(labels[k] for k in keep).count("x") == 20 == len(keep) - 20
    assert keep == balanced_subset(ids, labels, 40, seed=1)
    rng = np.random.default_rng(0)
    emb = {i: rng.normal(size=(3, 8)) for i in ids}
    r = pca_project(emb, dict(zip(ids, labels)), 2, subset=40, seed=1)
    assert len(r.ids) == 40 and r.layer == 2


def test_coordinate_tables_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    results = [pca_project(rng.normal(size=(30, 6)), ["a", "b"] * 15, layer, subset=None,
                           ids=[f"i{k}" for k in range(30)]) for layer in (0, 1)]
    write_coordinates(results, tmp_path / "m.coords.tsv")
    write_variance(results, tmp_path / "m.variance.tsv")
    back = read_coordinates(tmp_path / "m.coords.tsv")
    for r, b in zip(results, back):
        assert b.ids == r.ids and b.labels == r.labels
        assert np.allclose(b.coords, r.coords, rtol=1e-5, atol=1e-6)
        assert np.allclose(b.ratios, r.ratios, rtol=1e-5)
    paths = render_pca(back[1], tmp_path / "m.pca")
    assert all(p.exists() for p in paths)


# ---------------------------------------------------------------- exported results

@pytest.mark.parametrize("fmt, suffix", [("record-lines", "jsonl"), ("delimited-table", "tsv")])
def test_export_round_trip(tmp_path, fmt, suffix):
    summary = aggregate(grid_cells(splits=3))
    first = export_results(summary, fmt, tmp_path / f"a.{suffix}")
    back = read_results(first)
    assert back == summary
    second = export_results(back, fmt, tmp_path / f"b.{suffix}")
    assert first.read_bytes() == second.read_bytes()


def test_export_row_counts(tmp_path):
    summary = aggregate(grid_cells())
    contextual = [r for r in summary if r.mode in ("UNK", "PREP")]
    assert sum(r.n_splits for r in contextual) == 520
    path = export_results(summary, "delimited-table", tmp_path / "s.tsv")
    assert len(path.read_text().splitlines()) == len(summary) + 1


def test_empty_export_is_header_only(tmp_path):
    path = export_results([], "delimited-table", tmp_path / "e.tsv")
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and lines[0].split("\t")[0] == "config"
    assert read_results(path) == []
    assert export_results([], "record-lines", tmp_path / "e.jsonl").read_text() == ""


def test_unknown_format(tmp_path):
    with pytest.raises((ReportError, ValueError)):
        export_results([], "xml", tmp_path / "x")
