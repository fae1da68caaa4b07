"""Threat-model enforcement and the four transferability experiments.

The adversary owns the source system (model + data, white-box) and can only
query the target system through a LabelOracle that returns class names and
nothing else. Attack generation receives the source model exclusively; the
oracle is consulted only when already-generated batches are evaluated, and
every query is logged so tests can assert the black-box seal.

Each experiment runs a (method x epsilon x targeted) grid, producing one
TransferCell per (source, target) pairing with the success scores on both
sides plus the per-sample predictions they were computed from, so reports
can always be re-derived from their own serialization.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from advhar.attacks import AttackConfig, generate
from advhar.dataio import (
    LabelMap,
    apply_scaler,
    fit_scaler,
    split_by_subject,
    stratified_split,
)
from advhar.features import apply_feature_scaler, fit_feature_scaler
from advhar.models import train_cnn, train_feature_zoo

EPSILON_GRID = (0.1, 0.25, 0.5, 0.9)
GRADIENT_METHODS = ("FGSM", "BIM", "MIM", "JSMA", "CW")


class ConfigError(ValueError):
    """Raised when an experiment is configured inconsistently."""


# ---------------------------------------------------------------------------
# threat model
# ---------------------------------------------------------------------------

class LabelOracle:
    """Label-only query channel to a target system.

    The wrapped model is private; the public surface is classify() plus the
    query log. Scores and gradients are unreachable through this interface.
    """

    def __init__(self, model):
        self.__model = model
        self.query_log = []

    def classify(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        labels = self.__model.predict_label_names(batch)
        self.query_log.append(len(batch))
        return labels

    @property
    def query_count(self):
        return sum(self.query_log)


@dataclass
class ThreatModel:
    source_model: object
    source_data: object
    target: LabelOracle


# ---------------------------------------------------------------------------
# success score
# ---------------------------------------------------------------------------

def success_score(predictions, truths, target=None):
    """Percentage of adversarial examples that fooled the classifier.

    Untargeted: fraction predicted as anything but the truth. Targeted:
    fraction predicted as the target class, over the samples whose true
    label is not already the target.
    """
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if len(predictions) == 0:
        raise ValueError("cannot score an empty batch")
    if target is None:
        return 100.0 * int(np.sum(predictions != truths)) / len(truths)
    keep = truths != target
    if not np.any(keep):
        raise ValueError("every sample already belongs to the target class")
    return 100.0 * int(np.sum(predictions[keep] == target)) / int(np.sum(keep))


# ---------------------------------------------------------------------------
# report containers
# ---------------------------------------------------------------------------

@dataclass
class TransferCell:
    mode: str
    attack: str
    epsilon: float
    targeted: bool
    source_id: str
    target_id: str
    success_source: float
    success_target: float
    n: int
    true_source: list
    pred_source: list
    target_name_source: str | None
    true_target: list
    pred_target: list
    target_name_target: str | None

    def recompute(self):
        return (success_score(self.pred_source, self.true_source,
                              self.target_name_source),
                success_score(self.pred_target, self.true_target,
                              self.target_name_target))


@dataclass
class TransferReport:
    mode: str
    seed: int
    config: dict
    cells: list = field(default_factory=list)
    cross_accuracies: dict = field(default_factory=dict)

    CSV_HEADER = ("mode,attack,epsilon,targeted,source_id,target_id,"
                  "success_source,success_target,n")

    def verify_scores(self):
        """Eq-consistency: stored scores equal recomputation from the
        serialized per-sample predictions, exactly."""
        for cell in self.cells:
            s, t = cell.recompute()
            if s != cell.success_source or t != cell.success_target:
                raise AssertionError(
                    f"score mismatch in cell {cell.attack}/{cell.epsilon}")
        return True

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for c in self.cells:
                fh.write(f"{c.mode},{c.attack},{c.epsilon!r},{int(c.targeted)},"
                         f"{c.source_id},{c.target_id},{c.success_source!r},"
                         f"{c.success_target!r},{c.n}\n")

    def to_dict(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "cross_accuracies": self.cross_accuracies,
            "cells": [{
                "mode": c.mode, "attack": c.attack, "epsilon": c.epsilon,
                "targeted": c.targeted, "source_id": c.source_id,
                "target_id": c.target_id,
                "success_source": c.success_source,
                "success_target": c.success_target, "n": c.n,
                "true_source": list(map(str, c.true_source)),
                "pred_source": list(map(str, c.pred_source)),
                "target_name_source": c.target_name_source,
                "true_target": list(map(str, c.true_target)),
                "pred_target": list(map(str, c.pred_target)),
                "target_name_target": c.target_name_target,
            } for c in self.cells],
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        report = cls(mode=doc["mode"], seed=doc["seed"], config=doc["config"],
                     cross_accuracies=doc["cross_accuracies"])
        for c in doc["cells"]:
            report.cells.append(TransferCell(
                mode=c["mode"], attack=c["attack"], epsilon=c["epsilon"],
                targeted=c["targeted"], source_id=c["source_id"],
                target_id=c["target_id"],
                success_source=c["success_source"],
                success_target=c["success_target"], n=c["n"],
                true_source=c["true_source"], pred_source=c["pred_source"],
                target_name_source=c["target_name_source"],
                true_target=c["true_target"], pred_target=c["pred_target"],
                target_name_target=c["target_name_target"]))
        return report


# ---------------------------------------------------------------------------
# grid plumbing
# ---------------------------------------------------------------------------

def default_target_class(label_set, dataset_id="SYNTH"):
    """The paper's choices: Walking for MHEALTH, Sitting where available."""
    if dataset_id == "MHEALTH" and "Walking" in label_set:
        return "Walking"
    if "Sitting" in label_set:
        return "Sitting"
    return label_set[0]


def _cap_samples(n, max_samples, seed):
    if max_samples is None or n <= max_samples:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=max_samples, replace=False))


def attack_grid(methods, epsilons, targeted_modes):
    cells = []
    for targeted in targeted_modes:
        for method in methods:
            if targeted and method == "KNN_KSUB":
                continue  # kernel substitution is untargeted only
            for eps in epsilons:
                cells.append((method, float(eps), bool(targeted)))
    return cells


def _run_grid(worker, grid, jobs):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return [cells for cells in pool.map(worker, grid)]
    return [worker(spec) for spec in grid]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_between_models(features, seed=0, methods=GRADIENT_METHODS,
                       epsilons=(0.5,), targeted_modes=(False, True),
                       target_class=None, iterations=50, max_samples=None,
                       dnn_epochs=200, test_fraction=0.3,
                       include_nonparametric=False, attack_split="test",
                       jobs=1):
    """Attack from the feature-space DNN (optionally DTC/KNN too), evaluate
    on all six classifiers trained on the identical training split.

    Features arrive raw; conditioning into [-1, 1] happens here with
    statistics from this experiment's own training split.
    """
    train_raw, test_raw = stratified_split(features, test_fraction, seed)
    scaler = fit_feature_scaler(train_raw)
    train = apply_feature_scaler(scaler, train_raw)
    test = apply_feature_scaler(scaler, test_raw)
    zoo = train_feature_zoo(train, seed=seed, dnn_epochs=dnn_epochs)
    oracles = {kind: LabelOracle(model) for kind, model in zoo.items()}
    label_set = features.label_set
    if target_class is None:
        target_class = default_target_class(label_set, features.dataset_id)
    if target_class not in label_set:
        raise ConfigError(f"target class {target_class!r} not in label set")
    target_idx = label_set.index(target_class)

    split = train if attack_split == "train" else test
    idx = _cap_samples(len(split.values), max_samples, seed)
    X, y = split.values[idx], split.labels[idx]
    names = np.asarray(label_set)

    report = TransferReport(mode="between_models", seed=seed, config={
        "methods": list(methods), "epsilons": [float(e) for e in epsilons],
        "targeted_modes": [bool(t) for t in targeted_modes],
        "target_class": target_class, "iterations": iterations,
        "max_samples": max_samples, "dnn_epochs": dnn_epochs,
        "test_fraction": test_fraction, "attack_split": attack_split,
        "include_nonparametric": bool(include_nonparametric)})
    for kind, model in zoo.items():
        report.cross_accuracies[f"{kind}_train"] = model.evaluate(
            train.values, train.labels)
        report.cross_accuracies[f"{kind}_test"] = model.evaluate(
            test.values, test.labels)

    sources = [("DNN", zoo["DNN"], list(methods))]
    if include_nonparametric:
        sources.append(("DTC", zoo["DTC"], ["DT_REGION", "DT_PAPERNOT"]))
        sources.append(("KNN", zoo["KNN"], ["KNN_KSUB"]))

    def worker(spec):
        source_id, source_model, method, eps, targeted = spec
        cfg = AttackConfig(method, eps, iterations=iterations,
                           target_label=target_idx if targeted else None)
        batch = generate(source_model, X, y, cfg)
        true_names = names[y]
        pred_src = names[batch.pred_after]
        tname = target_class if targeted else None
        src_score = success_score(pred_src, true_names, tname)
        cells = []
        for kind in zoo:
            pred_tgt = oracles[kind].classify(batch.perturbed)
            cells.append(TransferCell(
                mode="between_models", attack=method, epsilon=eps,
                targeted=targeted, source_id=source_id, target_id=kind,
                success_source=src_score,
                success_target=success_score(pred_tgt, true_names, tname),
                n=len(batch), true_source=true_names.tolist(),
                pred_source=pred_src.tolist(), target_name_source=tname,
                true_target=true_names.tolist(), pred_target=pred_tgt.tolist(),
                target_name_target=tname))
        return cells

    grid = []
    for source_id, source_model, source_methods in sources:
        for method, eps, targeted in attack_grid(source_methods, epsilons, targeted_modes):
            grid.append((source_id, source_model, method, eps, targeted))
    for cells in _run_grid(worker, grid, jobs):
        report.cells.extend(cells)
    report.verify_scores()
    return report


def _condition_side(ds, seed, test_fraction):
    """Per-system conditioning: split, then scale with the side's own
    training statistics."""
    train, test = stratified_split(ds, test_fraction, seed)
    scaler = fit_scaler(train)
    return apply_scaler(scaler, train), apply_scaler(scaler, test), scaler


def _run_cnn_transfer(mode, source_id, target_id, src_ds, tgt_ds, seed,
                      methods, epsilons, targeted_modes, target_class,
                      iterations, max_samples, cnn_epochs, test_fraction,
                      attack_split, jobs, label_map=None):
    """Shared protocol: train same-architecture CNNs on the two conditioned
    sides, attack from the source, score both sides."""
    src_train, src_test, _ = _condition_side(src_ds, seed, test_fraction)
    tgt_train, tgt_test, _ = _condition_side(tgt_ds, seed + 1, test_fraction)

    source_model = train_cnn(src_train, seed=seed, epochs=cnn_epochs)
    target_model = train_cnn(tgt_train, seed=seed + 1, epochs=cnn_epochs)
    oracle = LabelOracle(target_model)

    src_names = np.asarray(src_ds.label_set)
    if target_class is None:
        target_class = default_target_class(src_ds.label_set, src_ds.dataset_id)
    if target_class not in src_ds.label_set:
        raise ConfigError(f"target class {target_class!r} not in source labels")
    target_idx = src_ds.label_set.index(target_class)
    mapping = label_map.map if label_map is not None else (lambda name: name)
    target_class_mapped = mapping(target_class)

    split = src_train if attack_split == "train" else src_test
    if label_map is not None:
        mappable = np.array([label_map.covers(src_names[l]) for l in split.labels])
        if not np.any(mappable):
            raise ConfigError("no source samples map into the target label set")
        split = split.subset(mappable)
    idx = _cap_samples(len(split.values), max_samples, seed)
    X, y = split.values[idx], split.labels[idx]
    true_src = src_names[y]
    true_tgt = np.array([mapping(name) for name in true_src])

    report = TransferReport(mode=mode, seed=seed, config={
        "methods": list(methods), "epsilons": [float(e) for e in epsilons],
        "targeted_modes": [bool(t) for t in targeted_modes],
        "target_class": target_class, "iterations": iterations,
        "max_samples": max_samples, "cnn_epochs": cnn_epochs,
        "test_fraction": test_fraction, "attack_split": attack_split,
        "source_id": source_id, "target_id": target_id})
    report.cross_accuracies = {
        f"{source_id}_model_on_source_test": source_model.evaluate(
            src_test.values, src_test.labels),
        f"{target_id}_model_on_target_test": target_model.evaluate(
            tgt_test.values, tgt_test.labels),
    }
    if label_map is None:
        # same label space: record the generalization matrix (Table-4 style)
        report.cross_accuracies[f"{source_id}_model_on_target_test"] = (
            source_model.evaluate(tgt_test.values, tgt_test.labels))
        report.cross_accuracies[f"{target_id}_model_on_source_test"] = (
            target_model.evaluate(src_test.values, src_test.labels))
    else:
        # cross-dataset: accuracy of the target model on mapped source samples
        pred = target_model.predict_label_names(X)
        report.cross_accuracies[f"{target_id}_model_on_source_test"] = float(
            np.mean(pred == true_tgt))

    def worker(spec):
        method, eps, targeted = spec
        cfg = AttackConfig(method, eps, iterations=iterations,
                           target_label=target_idx if targeted else None)
        batch = generate(source_model, X, y, cfg)
        pred_src = src_names[batch.pred_after]
        pred_tgt = oracle.classify(batch.perturbed)
        tname_src = target_class if targeted else None
        tname_tgt = target_class_mapped if targeted else None
        return [TransferCell(
            mode=mode, attack=method, epsilon=eps, targeted=targeted,
            source_id=source_id, target_id=target_id,
            success_source=success_score(pred_src, true_src, tname_src),
            success_target=success_score(pred_tgt, true_tgt, tname_tgt),
            n=len(batch), true_source=true_src.tolist(),
            pred_source=pred_src.tolist(), target_name_source=tname_src,
            true_target=true_tgt.tolist(), pred_target=pred_tgt.tolist(),
            target_name_target=tname_tgt)]

    for cells in _run_grid(worker, attack_grid(methods, epsilons, targeted_modes), jobs):
        report.cells.extend(cells)
    report.verify_scores()
    return report


def run_across_subjects(windows, seed=0, methods=GRADIENT_METHODS,
                        epsilons=EPSILON_GRID, targeted_modes=(False, True),
                        target_class=None, iterations=50, max_samples=None,
                        cnn_epochs=30, test_fraction=0.3, attack_split="test",
                        jobs=1):
    """Disjoint subject halves; identical CNN architectures on each side."""
    _, src_ds, tgt_ds = split_by_subject(windows, fraction=0.5, seed=seed)
    return _run_cnn_transfer(
        "across_subjects", "source_subjects", "target_subjects",
        src_ds, tgt_ds, seed, methods, epsilons, targeted_modes, target_class,
        iterations, max_samples, cnn_epochs, test_fraction, attack_split, jobs)


def run_across_locations(windows, pairs=None, seed=0, methods=GRADIENT_METHODS,
                         epsilons=EPSILON_GRID, targeted_modes=(False, True),
                         target_class=None, iterations=50, max_samples=None,
                         cnn_epochs=30, test_fraction=0.3, attack_split="test",
                         jobs=1):
    """Per configured (source position, target position) pair, the same
    protocol as across-subjects on position-filtered data."""
    present = sorted(set(windows.positions.tolist()))
    if pairs is None:
        if len(present) < 2:
            raise ConfigError("need at least two body positions")
        pairs = [(present[i], present[(i + 1) % len(present)])
                 for i in range(len(present))]
    reports = []
    for src_pos, tgt_pos in pairs:
        for pos in (src_pos, tgt_pos):
            if pos not in present:
                raise ConfigError(f"body position {pos!r} absent from dataset")
        src_ds = windows.subset(windows.positions == src_pos)
        tgt_ds = windows.subset(windows.positions == tgt_pos)
        reports.append(_run_cnn_transfer(
            "across_locations", src_pos, tgt_pos, src_ds, tgt_ds, seed,
            methods, epsilons, targeted_modes, target_class, iterations,
            max_samples, cnn_epochs, test_fraction, attack_split, jobs))
    return reports


def run_between_datasets(source_windows, target_windows, label_map,
                         seed=0, methods=GRADIENT_METHODS,
                         epsilons=EPSILON_GRID, targeted_modes=(False, True),
                         target_class=None, iterations=50, max_samples=None,
                         cnn_epochs=30, test_fraction=0.3, attack_split="test",
                         jobs=1):
    """Independently conditioned datasets; evaluation restricted to samples
    whose labels map into the target vocabulary."""
    if not isinstance(label_map, LabelMap):
        label_map = LabelMap(dict(label_map))
    missing = [v for v in label_map.pairs.values()
               if v not in target_windows.label_set]
    if missing:
        raise ConfigError(f"label map images {missing} absent from target labels")
    if target_class is None:
        shared = [name for name in source_windows.label_set
                  if label_map.covers(name)]
        preferred = default_target_class(source_windows.label_set,
                                         source_windows.dataset_id)
        target_class = preferred if preferred in shared else shared[0]
    if not label_map.covers(target_class):
        raise ConfigError(f"target class {target_class!r} is not a shared activity")
    return _run_cnn_transfer(
        "between_datasets", source_windows.dataset_id, target_windows.dataset_id,
        source_windows, target_windows, seed, methods, epsilons, targeted_modes,
        target_class, iterations, max_samples, cnn_epochs, test_fraction,
        attack_split, jobs, label_map=label_map)


