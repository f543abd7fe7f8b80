"""Command-line pipeline: validate, split, extract, probe, report, run-all.

Every subcommand takes one YAML experiment file. Relative paths inside it
resolve against the file's directory; ``NPNPROBE_CACHE_ROOT`` overrides the
embedding cache location.

Exit codes: 0 success, 1 data violation, 2 infeasible configuration,
3 missing or unusable resource (model, vectors, cache).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus import (
    CorpusIntegrityError, CorpusSchemaError, convert_table, filter_corpus, load_corpus, normalize, write_rows,
)
from .encoder import (
    CacheMiss, CapabilityError, CorruptCacheError, EmbeddingStore, EncoderHandle, ResourceError,
    StaleCacheError, TargetSpec, extract_embeddings, extraction_fingerprint,
)
from .probe import ProbeParams, aggregate, run_experiment, save_cells
from .report import (
    CurveSpec, export_results, pca_project, read_coordinates, read_results, render_confusion,
    render_layer_curves, render_pca, write_coordinates, write_variance,
)
from .splitter import (
    GENERALIZATION, InfeasibleSplitError, SplitAssignment, SplitConfiguration, generalization_split,
    generate_splits, get_configuration, task_label, verify_split,
)
from .staticvec import StaticVectorTable

log = logging.getLogger("npnprobe")

EXIT_OK, EXIT_DATA, EXIT_INFEASIBLE, EXIT_RESOURCE = 0, 1, 2, 3
CACHE_ENV = "NPNPROBE_CACHE_ROOT"


class StageError(RuntimeError):
    def __init__(self, stage, code, message):
        super().__init__(f"[{stage}] {message}")
        self.stage, self.code = stage, code


# --------------------------------------------------------------------------
# experiment file


@dataclass
class ExperimentConfig:
    path: Path
    raw: dict
    corpus: Path
    corpus_format: str
    configurations: list[SplitConfiguration]
    models: list[str]
    modes: list[str]
    static_tables: list[dict]
    seeds: dict
    cache_dir: Path
    output_dir: Path
    filter: dict
    probe: ProbeParams
    replication: dict | None = None
    pca_subset: int = 360
    confusion_layer: int = -1
    digest: str = field(default="")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path).resolve()
        text = path.read_bytes()
        raw = yaml.safe_load(text) or {}
        base = path.parent

        def resolve(p):
            return (base / p).resolve() if p is not None else None

        seeds = {"split": 0, "filter": 0, "probe": 0, "pca": 0, **(raw.get("seeds") or {})}
        configs = []
        for entry in raw.get("configurations") or ["SIMPLE"]:
            if isinstance(entry, str):
                cfg = get_configuration(str(resolve(entry)) if (base / entry).exists() else entry)
            elif "base" in entry:
                extra = {k: v for k, v in entry.items() if k != "base"}
                if "decremental_sizes" in extra:
                    extra["decremental_sizes"] = tuple(extra["decremental_sizes"] or ())
                cfg = get_configuration(entry["base"]).replace(**extra)
            else:
                cfg = SplitConfiguration.from_dict(entry)
            configs.append(cfg.replace(seed=seeds["split"], n_splits=raw.get("n_splits", cfg.n_splits)))
        probe = ProbeParams(**{**(raw.get("probe") or {}), "seed": seeds["probe"]})
        cache = os.environ.get(CACHE_ENV) or raw.get("cache_dir", "cache")
        replication = raw.get("replication")
        if replication:
            replication = {**replication, "source": resolve(replication["source"])}
        return cls(
            path=path, raw=raw,
            corpus=resolve(raw["corpus"]) if raw.get("corpus") else None,
            corpus_format=raw.get("corpus_format", "delimited-table"),
            configurations=configs,
            models=list(raw.get("models") or []),
            modes=list(raw.get("modes") or ["UNK", "PREP"]),
            static_tables=[{**t, "path": resolve(t["path"])} for t in raw.get("static_tables") or []],
            seeds=seeds,
            cache_dir=resolve(cache),
            output_dir=resolve(raw.get("output_dir", "out")),
            filter={"min_tokens": 6, "max_per_lemma_prep": 30, **(raw.get("filter") or {})},
            probe=probe,
            replication=replication,
            pca_subset=int(raw.get("pca_subset", 360)),
            confusion_layer=int(raw.get("confusion_layer", -1)),
            digest=hashlib.sha256(text).hexdigest(),
        )

    def model_path(self, model_id: str) -> str:
        local = self.path.parent / model_id
        return str(local.resolve()) if local.exists() else model_id

    def corpus_path(self) -> Path:
        if self.replication:
            return self.output_dir / "corpus.converted.tsv"
        if self.corpus is None:
            raise StageError("config", EXIT_DATA, "no corpus given")
        return self.corpus


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# shared loading


def _convert(exp: ExperimentConfig) -> None:
    rep = exp.replication
    rows = convert_table(rep["source"], rep.get("column_map") or {}, rep.get("defaults"),
                         language=rep.get("language", "en"))
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    write_rows(rows, exp.corpus_path())
    log.info("converted %d rows from %s", len(rows), rep["source"])


def _corpus(exp: ExperimentConfig, strict: bool = True):
    try:
        if exp.replication:
            _convert(exp)  # cheap, and never stale against the source table
        result = load_corpus(exp.corpus_path(), exp.corpus_format)
    except FileNotFoundError as exc:
        raise StageError("validate", EXIT_RESOURCE, f"corpus not found: {exc}")
    except (CorpusSchemaError, CorpusIntegrityError) as exc:
        raise StageError("validate", EXIT_DATA, str(exc))
    if strict and result.rejections:
        ids = ", ".join(r.instance_id or f"row {r.row}" for r in result.rejections[:10])
        raise StageError("validate", EXIT_DATA, f"{len(result.rejections)} invalid rows: {ids}")
    filtered = filter_corpus(result.instances, seed=exp.seeds["filter"], **exp.filter)
    return result, filtered


def _split_dir(exp, cfg):
    return exp.output_dir / "splits" / cfg.name


def _load_splits(exp, cfg, stage="probe") -> list[SplitAssignment]:
    d = _split_dir(exp, cfg)
    files = [d / f"split_{k}.jsonl" for k in range(cfg.n_splits)]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise StageError(stage, EXIT_DATA, f"split files missing (run `split` first): {missing[:3]}")
    return [SplitAssignment.load(f) for f in files]


def _tables(exp) -> list[StaticVectorTable]:
    out = []
    for t in exp.static_tables:
        try:
            out.append(StaticVectorTable.load(t["path"], t.get("format"), source_id=t.get("id"),
                                              oov_policy=t.get("oov_policy", "subword-compose")))
        except FileNotFoundError as exc:
            raise StageError("probe", EXIT_RESOURCE, f"static vectors not found: {exc}")
    return out


def _encoder(exp, model_id) -> EncoderHandle:
    try:
        handle = EncoderHandle.load(exp.model_path(model_id))
    except (ResourceError, CapabilityError) as exc:
        raise StageError("extract", EXIT_RESOURCE, str(exc))
    handle.model_id = model_id  # keep the configured name so caches move with the experiment
    return handle


# --------------------------------------------------------------------------
# stages


def cmd_validate(exp: ExperimentConfig) -> dict:
    result, filtered = _corpus(exp, strict=False)
    out = exp.output_dir / "validate"
    out.mkdir(parents=True, exist_ok=True)
    result.write_rejections(out / "rejections.jsonl")
    comp = Counter(f"{i.cls}|{i.semantic_label}|{normalize(i.prep)}" for i in filtered)
    report = {
        "rows": len(result.instances) + len(result.rejections),
        "valid": len(result.instances),
        "rejected": len(result.rejections),
        "after_filter": len(filtered),
        "rejections": [{"row": r.row, "id": r.instance_id, "reason": r.reason} for r in result.rejections],
        "composition": dict(sorted(comp.items())),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"rows={report['rows']} valid={report['valid']} rejected={report['rejected']} "
          f"after_filter={report['after_filter']}")
    for r in result.rejections:
        print(f"  rejected {r.instance_id or '?'} (row {r.row}): {r.reason}")
    if result.rejections:
        raise StageError("validate", EXIT_DATA, f"{len(result.rejections)} rows violate corpus invariants")
    return report


def _make_splits(corpus, cfg) -> list[SplitAssignment]:
    if cfg.task != GENERALIZATION:
        return generate_splits(corpus, cfg)
    train_preps = sorted({p for (part, _, p) in cfg.quotas if part == "train"})
    test_preps = sorted({p for (part, _, p) in cfg.quotas if part == "test"})
    return [generalization_split(corpus, train_preps, test_preps, seed=cfg.seed, split_index=k, base=cfg)
            for k in range(cfg.n_splits)]


def _same_splits(d, splits) -> bool:
    try:
        return all(SplitAssignment.load(d / f"split_{a.split_index}.jsonl").records() == a.records()
                   for a in splits) and len(list(d.glob("split_*.jsonl"))) == len(splits)
    except (OSError, ValueError, KeyError):
        return False


def cmd_split(exp: ExperimentConfig, force: bool = False, keep_identical: bool = False) -> dict:
    """Generate, verify and write split files.

    Existing files are only replaced with ``force``; with ``keep_identical``
    a rerun that would reproduce them exactly is accepted as a no-op.
    """
    _, corpus = _corpus(exp)
    written = {}
    for cfg in exp.configurations:
        d = _split_dir(exp, cfg)
        existing = sorted(d.glob("split_*.jsonl")) if d.exists() else []
        try:
            splits = _make_splits(corpus, cfg)
        except InfeasibleSplitError as exc:
            raise StageError("split", EXIT_INFEASIBLE, f"{cfg.name}: {exc}")
        if existing and not force and not (keep_identical and _same_splits(d, splits)):
            raise StageError("split", EXIT_DATA, f"{d} already holds {len(existing)} split files; use --force")
        d.mkdir(parents=True, exist_ok=True)
        for f in existing:
            f.unlink()
        for a in splits:
            report = verify_split(corpus, a, _verification_config(cfg, a))
            if not report.ok:
                raise StageError("split", EXIT_DATA, f"{cfg.name} split {a.split_index}: "
                                 f"{len(report)} violations, e.g. {report.violations[0]}")
            a.save(d / f"split_{a.split_index}.jsonl")
        cfg.save(d / "configuration.yaml")
        written[cfg.name] = len(splits)
        print(f"{cfg.name}: {len(splits)} splits verified "
              f"(train {len(splits[0].train_ids)}, test {len(splits[0].test_ids)})")
    return written


def _verification_config(cfg, a):
    if cfg.task != GENERALIZATION:
        return cfg
    # test cells take whatever the corpus holds; verify against realised sizes
    quotas = dict(cfg.quotas)
    for key, ids in a.cell_members.items():
        if key[0] == "test":
            quotas[key] = len(ids)
    return cfg.replace(quotas=quotas, declared_totals={})


def _needed_ids(exp) -> list[str]:
    ids = set()
    for cfg in exp.configurations:
        for a in _load_splits(exp, cfg, "extract"):
            ids.update(a.train_ids)
            ids.update(a.test_ids)
    return sorted(ids)


def cmd_extract(exp: ExperimentConfig) -> dict:
    _, corpus = _corpus(exp)
    by_id = {i.id: i for i in corpus}
    ids = [i for i in _needed_ids(exp) if i in by_id]
    stats = {"extracted": 0, "reused": 0, "repaired": 0}
    models = {}
    for model_id in exp.models:
        enc = _encoder(exp, model_id)
        models[model_id] = {"weights": enc.weights_fingerprint(), "tokenizer": enc.tokenizer_version,
                            "n_layers": enc.n_layers, "hidden": enc.hidden_size}
        with EmbeddingStore(exp.cache_dir) as store:
            for mode in exp.modes:
                for iid in ids:
                    inst = by_id[iid]
                    target = TargetSpec.for_instance(inst, mode)
                    fp = extraction_fingerprint(model_id, enc.tokenizer_version, mode, inst.sentence,
                                                target.char_span)
                    try:
                        store.read(iid, mode, model_id, fp)
                        stats["reused"] += 1
                        continue
                    except CacheMiss:
                        pass
                    except (StaleCacheError, CorruptCacheError) as exc:
                        log.warning("re-extracting: %s", exc)
                        stats["repaired"] += 1
                    store.write(extract_embeddings(enc, inst, target))
                    stats["extracted"] += 1
                store.flush()
    print(f"extract: {stats['extracted']} new, {stats['reused']} reused, {stats['repaired']} repaired")
    return {"stats": stats, "models": models}


def _pca_tables(exp, cfg, corpus, store):
    by_id = {i.id: i for i in corpus}
    a = _load_splits(exp, cfg)[0]
    ids = sorted(set(a.train_ids) | set(a.test_ids))
    labels = {i: task_label(by_id[i], cfg.task) for i in ids}
    d = exp.output_dir / "pca" / cfg.name
    for model_id in exp.models:
        for mode in exp.modes:
            block = store.read_many(ids, mode, model_id)
            lab = [labels[i] for i in ids]
            results = [pca_project(block, lab, layer, subset=exp.pca_subset, seed=exp.seeds["pca"], ids=ids)
                       for layer in range(block.shape[1])]
            stem = f"{_safe(model_id)}__{mode}"
            write_coordinates(results, d / f"{stem}.coords.tsv")
            write_variance(results, d / f"{stem}.variance.tsv")


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name).strip("_")


def cmd_probe(exp: ExperimentConfig) -> dict:
    _, corpus = _corpus(exp)
    tables = _tables(exp)
    out = exp.output_dir / "results"
    counts = {}
    with EmbeddingStore(exp.cache_dir) as store:
        for cfg in exp.configurations:
            splits = _load_splits(exp, cfg)
            for a in splits:
                report = verify_split(corpus, a, _verification_config(cfg, a))
                if not report.ok:
                    raise StageError("probe", EXIT_DATA, f"{cfg.name} split {a.split_index} fails verification")
            try:
                cells = run_experiment(corpus, cfg, splits, exp.models, exp.modes, tables, store,
                                       params=exp.probe)
            except CacheMiss as exc:
                raise StageError("probe", EXIT_RESOURCE, f"embedding cache incomplete: {exc}")
            save_cells(cells, out / f"{cfg.name}.cells.jsonl")
            summary = aggregate(cells)
            export_results(summary, "record-lines", out / f"{cfg.name}.summary.jsonl")
            export_results(summary, "delimited-table", out / f"{cfg.name}.summary.tsv")
            if exp.models:
                _pca_tables(exp, cfg, corpus, store)
            counts[cfg.name] = len(cells)
            print(f"{cfg.name}: {len(cells)} probe cells")
    return counts


def cmd_report(exp: ExperimentConfig) -> list[str]:
    """Figures from the exported tables only."""
    figs = exp.output_dir / "figures"
    written = []
    for cfg in exp.configurations:
        src = exp.output_dir / "results" / f"{cfg.name}.summary.jsonl"
        if not src.exists():
            raise StageError("report", EXIT_DATA, f"{src} missing (run `probe` first)")
        summary = read_results(src)
        if exp.models:
            written += render_layer_curves(summary, CurveSpec(cfg.name, models=exp.models, modes=exp.modes),
                                           figs / f"{cfg.name}.curves")
            full = max(r.train_size for r in summary if r.mode in exp.modes)
            for model_id in exp.models:
                rows = [r for r in summary if r.model_id == model_id and r.mode in exp.modes
                        and r.train_size == full and r.layer is not None]
                top = max(r.layer for r in rows)
                layer = top if exp.confusion_layer < 0 else min(exp.confusion_layer, top)
                panels = {r.mode: r.confusion for r in rows if r.layer == layer}
                labels = next(r.classes for r in rows)
                written += render_confusion({m: panels[m] for m in exp.modes if m in panels}, labels,
                                            figs / f"{cfg.name}.confusion.{_safe(model_id)}",
                                            title=f"{cfg.name}, layer {layer + 1}")
                for mode in exp.modes:
                    coords = exp.output_dir / "pca" / cfg.name / f"{_safe(model_id)}__{mode}.coords.tsv"
                    if coords.exists():
                        last = read_coordinates(coords)[-1]
                        written += render_pca(last, figs / f"{cfg.name}.pca.{_safe(model_id)}__{mode}",
                                              title=f"{cfg.name} {mode}, layer {last.layer + 1}")
    print(f"report: {len(written)} files")
    return [str(p) for p in written]


def _versions() -> dict:
    import matplotlib
    import scipy

    out = {"npnprobe": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}
    try:
        import torch
        import transformers

        out.update(torch=torch.__version__, transformers=transformers.__version__)
    except ImportError:
        pass
    return out


def write_manifest(exp: ExperimentConfig, models: dict) -> Path:
    outputs = {}
    for p in sorted(exp.output_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(exp.output_dir).as_posix()] = _sha256(p)
    manifest = {
        "config_sha256": exp.digest,
        "config": exp.raw,
        "seeds": exp.seeds,
        "configurations": {c.name: c.to_dict() for c in exp.configurations},
        "probe": {"C": exp.probe.C, "tol": exp.probe.tol, "max_iter": exp.probe.max_iter,
                  "scale": exp.probe.scale, "seed": exp.probe.seed},
        "corpus_sha256": _sha256(exp.corpus_path()),
        "models": models,
        "static_tables": {t.get("id") or Path(t["path"]).name: _sha256(t["path"]) for t in exp.static_tables},
        "versions": _versions(),
        "outputs": outputs,
    }
    path = exp.output_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def cmd_run_all(exp: ExperimentConfig, force: bool = False) -> Path:
    cmd_validate(exp)
    cmd_split(exp, force=force, keep_identical=True)
    models = cmd_extract(exp)["models"] if exp.models else {}
    cmd_probe(exp)
    cmd_report(exp)
    path = write_manifest(exp, models)
    print(f"manifest: {path}")
    return path


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npnprobe", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("validate", "split", "extract", "probe", "report", "run-all"):
        s = sub.add_parser(name)
        s.add_argument("config", help="experiment YAML file")
        if name in ("split", "run-all"):
            s.add_argument("--force", action="store_true", help="overwrite existing split files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = ExperimentConfig.load(args.config)
    except FileNotFoundError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (KeyError, ValueError, yaml.YAMLError) as exc:
        print(f"[config] invalid experiment file: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        if args.command == "validate":
            cmd_validate(exp)
        elif args.command == "split":
            cmd_split(exp, force=args.force)
        elif args.command == "extract":
            cmd_extract(exp)
        elif args.command == "probe":
            cmd_probe(exp)
        elif args.command == "report":
            cmd_report(exp)
        else:
            cmd_run_all(exp, force=args.force)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
