"""Experiment protocols, metrics and reports."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import episodic, vae
from .core import (ArgumentError, BatchLog, DomainDataset, Sample, SourceSet, SplitSpec, TrainConfig,
                   seeded_rng)
from .nets import as_batch

REPORT_VERSION = 1
VARIANTS = ("dgsense", "no_dg", "no_virtual", "multi_modal_gen", "cross_modal_gen")
SWEEPS = ("num_domains", "num_real", "num_virtual", "generator_variant")


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    confusion: list[list[int]]
    per_domain: dict[str, dict] = field(default_factory=dict)
    runtime_s: float = 0.0
    averaging: str = "macro"
    flags: list[str] = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        out = asdict(self)
        if not timing:
            out.pop("runtime_s")
        return out


@dataclass
class ExperimentSpec:
    split: SplitSpec = field(default_factory=SplitSpec)
    config: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "dgsense"
    repeats: tuple[int, ...] = (0,)
    dataset: str | None = None
    positive_class: int | None = None

    def __post_init__(self):
        self.repeats = tuple(int(s) for s in self.repeats)
        if not self.repeats:
            raise ArgumentError("repeats must list at least one seed")
        if self.variant not in VARIANTS:
            raise ArgumentError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "variant": self.variant, "repeats": list(self.repeats),
                "positive_class": self.positive_class,
                "split": {"mode": self.split.mode, "target_domains": list(self.split.target_domains),
                          "k": self.split.k},
                "config": self.config.to_dict()}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def compute_metrics(y_true, y_pred, positive_class: int | None = None,
                    num_classes: int | None = None) -> MetricsReport:
    """Accuracy plus precision/recall for ``positive_class`` or macro-averaged."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if len(y_true) != len(y_pred):
        raise ArgumentError(f"length mismatch: {len(y_true)} labels vs {len(y_pred)} predictions")
    if len(y_true) == 0:
        raise ArgumentError("cannot score an empty prediction set")
    if min(y_true.min(), y_pred.min()) < 0:
        raise ArgumentError("labels must be non-negative")
    k = max(int(y_true.max()), int(y_pred.max())) + 1
    if num_classes is not None:
        if k > num_classes:
            raise ArgumentError(f"label {k - 1} outside {num_classes} classes")
        k = num_classes
    if positive_class is not None and not 0 <= positive_class < k:
        raise ArgumentError(f"positive class {positive_class} outside {k} classes")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    accuracy = float(np.trace(confusion) / confusion.sum())

    flags = []

    def pr(c: int) -> tuple[float, float]:
        tp = confusion[c, c]
        predicted, actual = confusion[:, c].sum(), confusion[c, :].sum()
        if predicted == 0:
            flags.append(f"precision_undefined:{c}")
        if actual == 0:
            flags.append(f"recall_undefined:{c}")
        return (tp / predicted if predicted else 0.0), (tp / actual if actual else 0.0)

    if positive_class is not None:
        precision, recall = pr(positive_class)
        averaging = f"positive:{positive_class}"
    else:
        pairs = [pr(c) for c in range(k)]
        precision = float(np.mean([p for p, _ in pairs]))
        recall = float(np.mean([r for _, r in pairs]))
        averaging = "macro"
    return MetricsReport(accuracy, float(precision), float(recall), confusion.tolist(),
                         averaging=averaging, flags=flags)


def stratified_folds(labels, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Label-stratified partition of ``range(len(labels))`` into ``k`` folds."""
    labels = np.asarray(labels)
    if k < 2:
        raise ArgumentError("k must be at least 2")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < k:
        raise ArgumentError(f"class {classes[counts.argmin()]} has {counts.min()} samples, fewer than k={k}")
    assignment = np.empty(len(labels), dtype=np.int64)
    cursor = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        # continue the fold cursor across classes so fold sizes stay within one
        assignment[idx] = (cursor + np.arange(len(idx))) % k
        cursor = (cursor + len(idx)) % k
    return [np.flatnonzero(assignment == f) for f in range(k)]


# --------------------------------------------------------------------------
# training pipeline
# --------------------------------------------------------------------------


@dataclass
class TrainedModel:
    main: episodic.Network
    state: episodic.EpisodicState | None
    generator: nn.Module | None
    num_virtual: int
    history: dict


def _generator_kind(variant: str, override: str | None) -> str:
    if override is not None:
        return override
    return "multi" if variant == "multi_modal_gen" else "cross"


def _group_by_domain(samples: Sequence[Sample], order: Sequence[str]) -> dict[str, list[Sample]]:
    groups = {d: [] for d in order}
    for s in samples:
        groups[s.domain_id].append(s)
    return groups


def train_pipeline(train: SourceSet, cfg: TrainConfig, variant: str = "dgsense", log: BatchLog | None = None,
                   virtual_ratio: float | None = None, generator_variant: str | None = None) -> TrainedModel:
    """Generator -> virtual data -> domain networks -> main network, on source data only.

    Every stage draws from its own named stream of ``cfg.seed``, so skipping
    a stage (e.g. no virtual data) leaves the others' randomness unchanged.
    """
    if variant not in VARIANTS:
        raise ArgumentError(f"unknown variant {variant!r}")
    cfg.validate()
    seed = cfg.seed
    ratio = cfg.virtual_ratio if virtual_ratio is None else float(virtual_ratio)
    if variant in ("no_dg", "no_virtual"):
        ratio = 0.0
    real = train.samples()
    history: dict[str, Any] = {}

    generator, virtual = None, []
    if ratio > 0:
        kind = _generator_kind(variant, generator_variant)
        generator = vae.build_generator(kind, train.modalities, cfg, seeded_rng(seed, "generator/init"))
        generator, history["generator"] = vae.fit_generator(generator, real, cfg, seeded_rng(seed, "generator/fit"),
                                                            log)
        virtual = vae.generate_virtual(generator, real, cfg, seeded_rng(seed, "virtual"), ratio)

    domain_ids = train.domain_ids
    real_by_domain = _group_by_domain(real, domain_ids)
    all_by_domain = _group_by_domain(real + virtual, domain_ids)
    mods = train.modalities
    main = episodic.build_network(mods, train.num_classes, cfg, seeded_rng(seed, "main/init"))
    if variant == "no_dg":
        sources = [episodic.DomainBatchSource.from_samples(d, all_by_domain[d], mods) for d in domain_ids]
        main, history["main"] = episodic.train_pooled(main, sources, cfg, seeded_rng(seed, "main/train"), log)
        return TrainedModel(main, None, None, 0, history)

    dom_rng = seeded_rng(seed, "domain/init")
    state = episodic.EpisodicState(main, [episodic.build_network(mods, train.num_classes, cfg, dom_rng, d)
                                          for d in domain_ids])
    dom_data = all_by_domain if cfg.virtual_in_domain_nets else real_by_domain
    dom_sources = [episodic.DomainBatchSource.from_samples(d, dom_data[d], mods) for d in domain_ids]
    episodic.train_domains(state, dom_sources, cfg, seeded_rng(seed, "domain/train"), log)
    main_sources = [episodic.DomainBatchSource.from_samples(d, all_by_domain[d], mods) for d in domain_ids]
    episodic.train_main(state, main_sources, cfg, seeded_rng(seed, "main/train"), log)
    history.update(state.history)
    return TrainedModel(state.main, state, generator, len(virtual), history)


def predict_samples(main: episodic.Network, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = as_batch(samples[start:start + batch_size], main.modalities)
        preds.append(episodic.infer(main, batch)[0].numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(main: episodic.Network, samples: Sequence[Sample], positive_class: int | None = None) -> MetricsReport:
    y_true = np.array([s.label for s in samples])
    y_pred = predict_samples(main, samples)
    report = compute_metrics(y_true, y_pred, positive_class, main.num_classes)
    for d in sorted({s.domain_id for s in samples}):
        mask = np.array([s.domain_id == d for s in samples])
        sub = compute_metrics(y_true[mask], y_pred[mask], positive_class, main.num_classes)
        report.per_domain[d] = {"accuracy": sub.accuracy, "precision": sub.precision, "recall": sub.recall,
                                "n": int(mask.sum())}
    return report


def audit_leakage(log: BatchLog, held_out: Sequence[Sample]) -> list[str]:
    """Digests of held-out samples that appeared in any training batch."""
    seen = log.seen()
    return sorted({s.digest() for s in held_out} & seen)


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------


def _aggregate(reports: Sequence[MetricsReport]) -> dict:
    return {"accuracy": float(np.mean([r.accuracy for r in reports])),
            "precision": float(np.mean([r.precision for r in reports])),
            "recall": float(np.mean([r.recall for r in reports])),
            "accuracy_std": float(np.std([r.accuracy for r in reports])),
            "folds": len(reports)}


def run_fold(dataset: SourceSet, targets: Sequence[str], spec: ExperimentSpec, seed: int,
             log: BatchLog | None = None, **pipeline_kw) -> tuple[MetricsReport, TrainedModel]:
    """Train on every domain outside ``targets`` and score on ``targets``."""
    sources = [d for d in dataset.domain_ids if d not in targets]
    SplitSpec(target_domains=tuple(targets)).check_disjoint(sources)
    if not sources:
        raise ArgumentError("no source domains left after removing the targets")
    held_out = dataset.select(targets).samples()
    t0 = time.perf_counter()
    model = train_pipeline(dataset.select(sources), spec.config.replace(seed=seed), spec.variant, log,
                           **pipeline_kw)
    report = evaluate(model.main, held_out, spec.positive_class)
    report.runtime_s = time.perf_counter() - t0
    if log is not None:
        leaked = audit_leakage(log, held_out)
        if leaked:
            report.flags.append(f"leakage:{len(leaked)}")
    return report, model


def leave_one_domain_out(dataset: SourceSet, spec: ExperimentSpec, audit: bool = True) -> dict:
    """One fold per target domain (``spec.split.target_domains`` or all) and per seed."""
    if dataset.num_domains < 2:
        raise ArgumentError("leave-one-domain-out needs at least two domains")
    targets = spec.split.target_domains or tuple(dataset.domain_ids)
    unknown = set(targets) - set(dataset.domain_ids)
    if unknown:
        raise ArgumentError(f"unknown target domains {sorted(unknown)}")
    folds, reports = [], []
    for target in targets:
        for seed in spec.repeats:
            log = BatchLog() if audit else None
            report, model = run_fold(dataset, (target,), spec, seed, log)
            reports.append(report)
            entry = {"target": target, "seed": seed, "metrics": report, "num_virtual": model.num_virtual}
            if log is not None:
                entry["batches"] = log.summary()
                entry["leaked"] = len(audit_leakage(log, dataset.domain(target).samples))
            folds.append(entry)
    return {"folds": folds, "aggregate": _aggregate(reports)}


def _subset(dataset: SourceSet, samples: Sequence[Sample]) -> SourceSet:
    groups = _group_by_domain(samples, dataset.domain_ids)
    domains = tuple(DomainDataset(d, tuple(groups[d])) for d in dataset.domain_ids if groups[d])
    return SourceSet(domains, dataset.label_names, dataset.modalities)


def k_fold_in_domain(dataset: SourceSet, k: int, spec: ExperimentSpec) -> dict:
    """Stratified k-fold over all samples; the aggregate pools every test fold's confusion."""
    samples = dataset.samples()
    labels = np.array([s.label for s in samples])
    folds, pooled = [], np.zeros((dataset.num_classes,) * 2, dtype=np.int64)
    for seed in spec.repeats:
        parts = stratified_folds(labels, k, seeded_rng(seed, "kfold"))
        for f, test_idx in enumerate(parts):
            test_set = set(test_idx.tolist())
            train = [s for i, s in enumerate(samples) if i not in test_set]
            test = [samples[i] for i in test_idx]
            t0 = time.perf_counter()
            model = train_pipeline(_subset(dataset, train), spec.config.replace(seed=seed), spec.variant)
            report = evaluate(model.main, test, spec.positive_class)
            report.runtime_s = time.perf_counter() - t0
            pooled += np.asarray(report.confusion)
            folds.append({"fold": f, "seed": seed, "metrics": report})
    agg = _aggregate([f["metrics"] for f in folds])
    agg["pooled_accuracy"] = float(np.trace(pooled) / pooled.sum())
    return {"folds": folds, "aggregate": agg}


def _keep_real(dataset: SourceSet, per_class: int) -> SourceSet:
    """First ``per_class`` samples of every (domain, label) group."""
    kept = []
    for d in dataset.domains:
        counts: dict[int, int] = {}
        for s in d.samples:
            if counts.get(s.label, 0) < per_class:
                kept.append(s)
                counts[s.label] = counts.get(s.label, 0) + 1
    return _subset(dataset, kept)


def run_ablation(dataset: SourceSet, sweep: str, grid: Sequence, spec: ExperimentSpec) -> list[dict]:
    """One row per grid value: mean target accuracy over ``spec.repeats`` plus runtime.

    The target is the first of ``spec.split.target_domains``, else the last
    domain. ``num_domains`` keeps the first g remaining domains as sources;
    ``num_real`` keeps that many real samples per class and domain;
    ``num_virtual`` sets the virtual-to-real ratio; ``generator_variant``
    picks 'cross' or 'multi'.
    """
    if sweep not in SWEEPS:
        raise ArgumentError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")
    if not grid:
        raise ArgumentError("empty grid")
    target = spec.split.target_domains[0] if spec.split.target_domains else dataset.domain_ids[-1]
    if target not in dataset.domain_ids:
        raise ArgumentError(f"unknown target domain {target!r}")
    others = [d for d in dataset.domain_ids if d != target]
    min_group = min(int(np.sum(d.labels == c)) for d in dataset.domains for c in range(dataset.num_classes))
    for value in grid:
        if sweep == "num_domains" and not (isinstance(value, (int, np.integer)) and 1 <= value <= len(others)):
            raise ArgumentError(f"num_domains must be an integer in [1, {len(others)}], got {value!r}")
        if sweep == "num_real" and not (isinstance(value, (int, np.integer)) and 1 <= value <= min_group):
            raise ArgumentError(f"num_real must be an integer in [1, {min_group}], got {value!r}")
        if sweep == "num_virtual" and not (isinstance(value, (int, float)) and value >= 0):
            raise ArgumentError(f"num_virtual ratio must be non-negative, got {value!r}")
        if sweep == "generator_variant" and value not in ("cross", "multi"):
            raise ArgumentError(f"generator_variant must be 'cross' or 'multi', got {value!r}")

    rows = []
    for value in grid:
        data, kw = dataset, {}
        if sweep == "num_domains":
            data = dataset.select(others[:int(value)] + [target])
        elif sweep == "num_real":
            data = _keep_real(dataset.select(others), int(value))
            data = SourceSet(data.domains + (dataset.domain(target),), data.label_names, data.modalities)
        elif sweep == "num_virtual":
            kw["virtual_ratio"] = float(value)
        else:
            kw["generator_variant"] = value
        accs, t0 = [], time.perf_counter()
        for seed in spec.repeats:
            report, _ = run_fold(data, (target,), spec, seed, **kw)
            accs.append(report.accuracy)
        rows.append({"sweep": sweep, "value": value, "target": target, "accuracies": accs,
                     "mean_accuracy": float(np.mean(accs)), "runtime_s": time.perf_counter() - t0})
    return rows


def quality_check_virtual(gen: nn.Module, real: Sequence[Sample], cfg: TrainConfig,
                          num_classes: int | None = None) -> tuple[float, float]:
    """Two-way check: classifier trained on real scored on virtual, and the reverse.

    Virtual samples are generated from ``real`` with the configured omegas,
    one per real sample.
    """
    vae._ensure_ready(gen)
    if not real:
        raise ArgumentError("need real samples")
    num_classes = num_classes or max(s.label for s in real) + 1
    modalities = gen.modalities if hasattr(gen, "modalities") else (gen.modality,)
    virtual = vae.generate_virtual(gen, real, cfg, seeded_rng(cfg.seed, "quality/virtual"), ratio=1.0)

    def fit(samples: Sequence[Sample], tag: str) -> episodic.Network:
        net = episodic.build_network(modalities, num_classes, cfg, seeded_rng(cfg.seed, f"quality/{tag}/init"))
        pooled = [s.replace(domain_id="pooled") for s in samples]
        src = episodic.DomainBatchSource.from_samples("pooled", pooled, modalities)
        episodic.train_pooled(net, [src], cfg, seeded_rng(cfg.seed, f"quality/{tag}/train"))
        return net

    def acc(net, samples):
        y = np.array([s.label for s in samples])
        return float(np.mean(predict_samples(net, samples) == y))

    return acc(fit(real, "real"), virtual), acc(fit(virtual, "virtual"), real)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, MetricsReport):
        return obj.to_dict(timing=False)
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def build_report(spec: ExperimentSpec, result: Mapping) -> tuple[dict, dict]:
    """(report, timing): the report holds no wall-clock values so reruns compare byte-for-byte."""
    report = {"version": REPORT_VERSION, "spec": spec.to_dict(), "folds": _plain(result["folds"]),
              "aggregate": _plain(result["aggregate"])}
    timing = {"folds": [f["metrics"].runtime_s for f in result["folds"]]}
    return report, timing


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def folds_csv(report: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "fold", "seed", "accuracy", "precision", "recall"])
    for f in report["folds"]:
        m = f["metrics"]
        w.writerow([f.get("target", ""), f.get("fold", ""), f["seed"], repr(m["accuracy"]), repr(m["precision"]),
                    repr(m["recall"])])
    return buf.getvalue()


def ablation_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "value", "target", "mean_accuracy"])
    for r in rows:
        w.writerow([r["sweep"], r["value"], r["target"], repr(r["mean_accuracy"])])
    return buf.getvalue()
