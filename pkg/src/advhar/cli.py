"""Config-driven command-line front end.

Six stages chain through files in one output directory:

    prepare  -> windows.csv (+ windows_target.csv), scaler.json, summary
    train    -> models/*.npz, features.csv (between_models), train_report.json
    attack   -> batches/<method>_eps<e>_<mode>.{adv,orig}.csv
    transfer -> report.csv, report.json
    analyze  -> analysis/ heatmaps, curves, embedding, overlap
    report   -> manifest.json (config + stage seeds + artifact hashes)

One root seed drives everything: each stage derives its own seed as the
first state word of numpy's SeedSequence over (root_seed, stage_ordinal), and
the data splits share a dedicated "split" ordinal so every stage re-derives
identical partitions. Outputs are reproducible byte-for-byte from (inputs,
config, seed).

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

import numpy as np

from advhar import analysis as ana
from advhar import harness
from advhar.attacks import AttackConfig, generate, load_batch, save_batch
from advhar.dataio import (
    DataError,
    SHARED_ACTIVITIES,
    balance_classes,
    default_label_map,
    fit_scaler,
    apply_scaler,
    import_dataset,
    read_canonical_dataset,
    split_by_subject,
    stratified_split,
    synth_generate,
    window_recordings,
    write_canonical_csv,
)
from advhar.features import (
    apply_feature_scaler,
    extract_dataset,
    fit_feature_scaler,
    read_feature_csv,
    write_feature_csv,
)
from advhar.harness import ConfigError, LabelOracle, TransferCell, TransferReport
from advhar.models import load_model, save_model, train_cnn, train_feature_zoo

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

STAGES = ("prepare", "train", "attack", "transfer", "analyze", "report")
STAGE_ORDINALS = {"split": 0, "prepare": 1, "train": 2, "attack": 3,
                  "transfer": 4, "analyze": 5}

MODES = ("between_models", "across_subjects", "across_locations",
         "between_datasets")

DEFAULT_CONFIG = {
    "mode": None,
    "dataset": {"layout": "synth", "path": None,
                "synth": {"n_subjects": 6, "n_classes": 6,
                          "windows_per_class": 20}},
    "target_dataset": None,
    "label_map": None,
    "position_pairs": None,
    "attacks": {"methods": ["FGSM", "BIM", "MIM", "JSMA", "CW"],
                "epsilons": [0.1, 0.25, 0.5, 0.9], "iterations": 50},
    "targeted": "both",
    "target_class": None,
    "train": {"dnn_epochs": 200, "cnn_epochs": 30, "rfc_trees": 100},
    "split": {"test_fraction": 0.3, "subject_fraction": 0.5},
    "balance": False,
    "max_attack_samples": 256,
    "include_nonparametric": False,
    "attack_split": "test",
    "analysis": {"top_k": 40},
    "seed": 0,
    "out": None,
    "jobs": None,
}


def _merge_validate(defaults, given, path=""):
    """Defaults overlaid with the given document; unknown keys rejected."""
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_validate(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def load_config(path, seed=None, out=None, jobs=None):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    cfg = _merge_validate(DEFAULT_CONFIG, doc)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if jobs is not None:
        cfg["jobs"] = jobs
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg['mode']!r}")
    if cfg["out"] is None:
        raise ConfigError("no output directory (config key 'out' or --out)")
    if cfg["mode"] == "between_datasets" and cfg["target_dataset"] is None:
        raise ConfigError("between_datasets needs a target_dataset")
    if cfg["targeted"] not in ("both", "targeted", "untargeted"):
        raise ConfigError("targeted must be both|targeted|untargeted")
    if cfg["attack_split"] not in ("test", "train"):
        raise ConfigError("attack_split must be test|train")
    if cfg["jobs"] is None:
        cfg["jobs"] = os.cpu_count() or 1
    return cfg


def stage_seed(root_seed, stage):
    seq = np.random.SeedSequence((int(root_seed), STAGE_ORDINALS[stage]))
    return int(seq.generate_state(1)[0])


def targeted_modes(cfg):
    return {"both": (False, True), "targeted": (True,),
            "untargeted": (False,)}[cfg["targeted"]]


# ---------------------------------------------------------------------------
# dataset materialization and reloads
# ---------------------------------------------------------------------------

def _materialize(spec, seed):
    layout = spec["layout"]
    if layout == "synth":
        s = spec["synth"]
        return synth_generate(s["n_subjects"], s["n_classes"],
                              s["windows_per_class"], seed=seed)
    if spec["path"] is None:
        raise ConfigError(f"dataset layout {layout!r} needs a path")
    recordings = import_dataset(spec["path"], layout)
    return window_recordings(recordings)


def _paths(cfg):
    out = cfg["out"]
    return {
        "out": out,
        "windows": os.path.join(out, "windows.csv"),
        "windows_target": os.path.join(out, "windows_target.csv"),
        "scaler": os.path.join(out, "scaler.json"),
        "summary": os.path.join(out, "prepare_summary.json"),
        "features": os.path.join(out, "features.csv"),
        "feature_scaler": os.path.join(out, "feature_scaler.json"),
        "models": os.path.join(out, "models"),
        "batches": os.path.join(out, "batches"),
        "train_report": os.path.join(out, "train_report.json"),
        "report_csv": os.path.join(out, "report.csv"),
        "report_json": os.path.join(out, "report.json"),
        "analysis": os.path.join(out, "analysis"),
        "manifest": os.path.join(out, "manifest.json"),
    }


def _load_summary(paths):
    if not os.path.exists(paths["summary"]):
        raise DataError("no prepared data found; run the prepare stage first")
    with open(paths["summary"], encoding="utf-8") as fh:
        return json.load(fh)


def _load_windows(paths, summary, which="windows"):
    return read_canonical_dataset(paths[which],
                                  label_set=summary["label_set"][which])


def _dataset_counts(ds):
    names = ds.label_names()
    return {
        "n_windows": len(ds),
        "per_class": {name: int((names == name).sum())
                      for name in ds.label_set},
        "per_subject": {str(s): int((ds.subjects == s).sum())
                        for s in sorted(set(ds.subjects.tolist()))},
        "per_position": {p: int((ds.positions == p).sum())
                         for p in sorted(set(ds.positions.tolist()))},
    }


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_prepare(cfg):
    paths = _paths(cfg)
    os.makedirs(paths["out"], exist_ok=True)
    prep_seed = stage_seed(cfg["seed"], "prepare")
    split_seed = stage_seed(cfg["seed"], "split")

    summary = {"label_set": {}, "counts": {}, "scaled": True}
    scalers = {}
    specs = [("windows", cfg["dataset"])]
    if cfg["mode"] == "between_datasets":
        specs.append(("windows_target", cfg["target_dataset"]))
    for offset, (name, spec) in enumerate(specs):
        ds = _materialize(spec, prep_seed + offset)
        if cfg["balance"]:
            ds = balance_classes(ds, seed=prep_seed + 10 + offset)
        train, _ = stratified_split(ds, cfg["split"]["test_fraction"],
                                    split_seed + offset)
        scaler = fit_scaler(train)
        ds = apply_scaler(scaler, ds)
        write_canonical_csv(ds, paths[name])
        scalers[name] = {"minimum": scaler.minimum.tolist(),
                         "maximum": scaler.maximum.tolist()}
        summary["label_set"][name] = list(ds.label_set)
        summary["counts"][name] = _dataset_counts(ds)

    with open(paths["scaler"], "w", encoding="utf-8") as fh:
        json.dump(scalers, fh, sort_keys=True, indent=1)
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)

    for name, counts in summary["counts"].items():
        print(f"{name}: {counts['n_windows']} windows")
        print(f"  per class: {counts['per_class']}")
        print(f"  per subject: {counts['per_subject']}")
        print(f"  per position: {counts['per_position']}")
    return EXIT_OK


def _experiment_sides(cfg, paths, summary):
    """(source_id, target_id, source_windows, target_windows) per pairing."""
    windows = _load_windows(paths, summary)
    mode = cfg["mode"]
    split_seed = stage_seed(cfg["seed"], "split")
    if mode == "across_subjects":
        _, src, tgt = split_by_subject(windows, cfg["split"]["subject_fraction"],
                                       seed=split_seed)
        return [("source_subjects", "target_subjects", src, tgt)]
    if mode == "across_locations":
        pairs = cfg["position_pairs"]
        present = sorted(set(windows.positions.tolist()))
        if pairs is None:
            if len(present) < 2:
                raise ConfigError("need two body positions for across_locations")
            pairs = [[present[i], present[(i + 1) % len(present)]]
                     for i in range(len(present))]
        out = []
        for src_pos, tgt_pos in pairs:
            for pos in (src_pos, tgt_pos):
                if pos not in present:
                    raise ConfigError(f"position {pos!r} absent from dataset")
            out.append((src_pos, tgt_pos,
                        windows.subset(windows.positions == src_pos),
                        windows.subset(windows.positions == tgt_pos)))
        return out
    if mode == "between_datasets":
        target = _load_windows(paths, summary, "windows_target")
        return [(windows.dataset_id, target.dataset_id, windows, target)]
    raise ConfigError(f"unsupported sides for mode {mode!r}")


def _pair_tag(source_id, target_id):
    return f"{source_id}__{target_id}"


def cmd_train(cfg):
    paths = _paths(cfg)
    summary = _load_summary(paths)
    os.makedirs(paths["models"], exist_ok=True)
    train_seed = stage_seed(cfg["seed"], "train")
    split_seed = stage_seed(cfg["seed"], "split")
    frac = cfg["split"]["test_fraction"]
    report = {"mode": cfg["mode"], "seed": cfg["seed"], "models": {}}

    if cfg["mode"] == "between_models":
        windows = _load_windows(paths, summary)
        features = extract_dataset(windows)
        write_feature_csv(features, paths["features"])
        train_raw, test_raw = stratified_split(features, frac, split_seed)
        fscaler = fit_feature_scaler(train_raw)
        with open(paths["feature_scaler"], "w", encoding="utf-8") as fh:
            json.dump({"minimum": fscaler.minimum.tolist(),
                       "maximum": fscaler.maximum.tolist()},
                      fh, sort_keys=True, indent=1)
        train = apply_feature_scaler(fscaler, train_raw)
        test = apply_feature_scaler(fscaler, test_raw)
        zoo = train_feature_zoo(train, seed=train_seed,
                                dnn_epochs=cfg["train"]["dnn_epochs"],
                                rfc_trees=cfg["train"]["rfc_trees"])
        print(f"{'model':>6} {'train acc':>10} {'test acc':>10}")
        for kind, model in zoo.items():
            save_model(model, os.path.join(paths["models"], f"{kind}.npz"))
            tr = model.evaluate(train.values, train.labels)
            te = model.evaluate(test.values, test.labels)
            report["models"][kind] = {"train_accuracy": tr, "test_accuracy": te}
            print(f"{kind:>6} {100 * tr:>9.2f}% {100 * te:>9.2f}%")
    else:
        for i, (src_id, tgt_id, src_ds, tgt_ds) in enumerate(
                _experiment_sides(cfg, paths, summary)):
            tag = _pair_tag(src_id, tgt_id)
            src_train, src_test = stratified_split(src_ds, frac, split_seed + 2 * i)
            tgt_train, tgt_test = stratified_split(tgt_ds, frac, split_seed + 2 * i + 1)
            src_model = train_cnn(src_train, seed=train_seed + 2 * i,
                                  epochs=cfg["train"]["cnn_epochs"])
            tgt_model = train_cnn(tgt_train, seed=train_seed + 2 * i + 1,
                                  epochs=cfg["train"]["cnn_epochs"])
            save_model(src_model, os.path.join(paths["models"], f"{tag}.source.npz"))
            save_model(tgt_model, os.path.join(paths["models"], f"{tag}.target.npz"))
            entry = {
                "source_on_source_test": src_model.evaluate(src_test.values,
                                                            src_test.labels),
                "target_on_target_test": tgt_model.evaluate(tgt_test.values,
                                                            tgt_test.labels),
            }
            if cfg["mode"] != "between_datasets":
                entry["source_on_target_test"] = src_model.evaluate(
                    tgt_test.values, tgt_test.labels)
                entry["target_on_source_test"] = tgt_model.evaluate(
                    src_test.values, src_test.labels)
            report["models"][tag] = entry
            print(f"{tag}: " + ", ".join(f"{k}={100 * v:.2f}%"
                                         for k, v in entry.items()))

    with open(paths["train_report"], "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    return EXIT_OK


def _resolve_target_class(cfg, label_set, dataset_id, label_map=None):
    name = cfg["target_class"]
    if name is None:
        if label_map is not None:
            shared = [n for n in label_set if label_map.covers(n)]
            preferred = harness.default_target_class(label_set, dataset_id)
            name = preferred if preferred in shared else shared[0]
        else:
            name = harness.default_target_class(label_set, dataset_id)
    if name not in label_set:
        raise ConfigError(f"target class {name!r} not in label set")
    return name


def _label_map_for(cfg, summary):
    if cfg["mode"] != "between_datasets":
        return None
    from advhar.dataio import LabelMap

    if cfg["label_map"] is not None:
        return LabelMap(dict(cfg["label_map"]))
    src = summary["label_set"]["windows"]
    tgt = summary["label_set"]["windows_target"]
    shared = [n for n in src if n in tgt]
    if shared:
        return LabelMap({n: n for n in shared})
    src_guess = [d for d, names in SHARED_ACTIVITIES.items()
                 if set(names) <= set(src)]
    tgt_guess = [d for d, names in SHARED_ACTIVITIES.items()
                 if set(names) <= set(tgt)]
    if src_guess and tgt_guess:
        return default_label_map(src_guess[0], tgt_guess[0])
    raise ConfigError("no label_map given and none derivable from label sets")


def _attack_samples(cfg, side_index, src_ds):
    split_seed = stage_seed(cfg["seed"], "split")
    attack_seed = stage_seed(cfg["seed"], "attack")
    frac = cfg["split"]["test_fraction"]
    train, test = stratified_split(src_ds, frac, split_seed + 2 * side_index)
    split = train if cfg["attack_split"] == "train" else test
    idx = harness._cap_samples(len(split.values), cfg["max_attack_samples"],
                               attack_seed)
    return split.subset(idx)


def cmd_attack(cfg):
    paths = _paths(cfg)
    summary = _load_summary(paths)
    os.makedirs(paths["batches"], exist_ok=True)
    modes = targeted_modes(cfg)
    methods = list(cfg["attacks"]["methods"])
    epsilons = [float(e) for e in cfg["attacks"]["epsilons"]]
    iterations = cfg["attacks"]["iterations"]
    manifest = []

    def run_grid(source_model, samples, values, labels, label_set, target_idx,
                 prefix, grid_methods):
        names = np.asarray(label_set)
        for method, eps, targeted in harness.attack_grid(grid_methods, epsilons,
                                                         modes):
            acfg = AttackConfig(method, eps, iterations=iterations,
                                target_label=target_idx if targeted else None)
            batch = generate(source_model, values, labels, acfg)
            batch.validate()  # hard failure before anything is written
            tag = (f"{prefix}{method}_eps{eps}_"
                   f"{'targeted' if targeted else 'untargeted'}")
            save_batch(batch, os.path.join(paths["batches"], tag),
                       dataset_id=samples.dataset_id, subjects=samples.subjects,
                       positions=samples.positions, label_set=names)
            manifest.append(tag)
            print(f"{tag}: n={len(batch)} "
                  f"source_flip={np.mean(batch.pred_after != batch.pred_before):.2f}")

    if cfg["mode"] == "between_models":
        summary_labels = summary["label_set"]["windows"]
        features = read_feature_csv(paths["features"], label_set=summary_labels)
        with open(paths["feature_scaler"], encoding="utf-8") as fh:
            doc = json.load(fh)
        from advhar.features import FeatureScalerParams

        fscaler = FeatureScalerParams(np.array(doc["minimum"]),
                                      np.array(doc["maximum"]))
        scaled = apply_feature_scaler(fscaler, features)
        samples = _attack_samples(cfg, 0, scaled)
        target_name = _resolve_target_class(cfg, summary_labels,
                                            samples.dataset_id)
        target_idx = summary_labels.index(target_name)
        sources = [("DNN", "")]
        if cfg["include_nonparametric"]:
            sources += [("DTC", ""), ("KNN", "")]
        grid_by_source = {"DNN": [m for m in methods
                                  if m in harness.GRADIENT_METHODS],
                          "DTC": ["DT_REGION", "DT_PAPERNOT"],
                          "KNN": ["KNN_KSUB"]}
        for kind, _ in sources:
            model = load_model(os.path.join(paths["models"], f"{kind}.npz"))
            run_grid(model, samples, samples.values, samples.labels,
                     summary_labels, target_idx, f"{kind}_", grid_by_source[kind])
    else:
        label_map = _label_map_for(cfg, summary)
        for i, (src_id, tgt_id, src_ds, tgt_ds) in enumerate(
                _experiment_sides(cfg, paths, summary)):
            tag = _pair_tag(src_id, tgt_id)
            model = load_model(os.path.join(paths["models"], f"{tag}.source.npz"))
            samples = _attack_samples(cfg, i, src_ds)
            if label_map is not None:
                names = samples.label_names()
                mappable = np.array([label_map.covers(n) for n in names])
                if not np.any(mappable):
                    raise ConfigError("no attack samples map into the target labels")
                samples = samples.subset(mappable)
            target_name = _resolve_target_class(cfg, src_ds.label_set,
                                                src_ds.dataset_id, label_map)
            target_idx = src_ds.label_set.index(target_name)
            run_grid(model, samples, samples.values, samples.labels,
                     src_ds.label_set, target_idx, f"{tag}.", methods)

    with open(os.path.join(paths["batches"], "index.json"), "w",
              encoding="utf-8") as fh:
        json.dump(sorted(manifest), fh, indent=1)
    return EXIT_OK


def cmd_transfer(cfg):
    paths = _paths(cfg)
    summary = _load_summary(paths)
    with open(os.path.join(paths["batches"], "index.json"), encoding="utf-8") as fh:
        tags = json.load(fh)
    with open(paths["train_report"], encoding="utf-8") as fh:
        train_report = json.load(fh)

    report = TransferReport(mode=cfg["mode"], seed=cfg["seed"],
                            config={k: cfg[k] for k in
                                    ("mode", "attacks", "targeted",
                                     "target_class", "attack_split",
                                     "max_attack_samples", "train", "split")})
    for key, entry in train_report["models"].items():
        for name, value in (entry.items() if isinstance(entry, dict) else []):
            report.cross_accuracies[f"{key}.{name}"] = value

    if cfg["mode"] == "between_models":
        label_set = summary["label_set"]["windows"]
        names = np.asarray(label_set)
        oracles = {}
        for kind in ("SVC", "RFC", "KNN", "DTC", "LRC", "DNN"):
            oracles[kind] = LabelOracle(
                load_model(os.path.join(paths["models"], f"{kind}.npz")))
        for tag in tags:
            source_id = tag.split("_", 1)[0]
            batch = load_batch(os.path.join(paths["batches"], tag),
                               label_set=label_set)
            true_names = names[batch.true_labels]
            pred_src = names[batch.pred_after]
            tname = (names[batch.target_label]
                     if batch.target_label is not None else None)
            for kind, oracle in oracles.items():
                pred_tgt = oracle.classify(batch.perturbed)
                report.cells.append(TransferCell(
                    mode=cfg["mode"], attack=batch.method,
                    epsilon=batch.config.epsilon,
                    targeted=batch.target_label is not None,
                    source_id=source_id, target_id=kind,
                    success_source=harness.success_score(pred_src, true_names, tname),
                    success_target=harness.success_score(pred_tgt, true_names, tname),
                    n=len(batch), true_source=true_names.tolist(),
                    pred_source=pred_src.tolist(), target_name_source=tname,
                    true_target=true_names.tolist(),
                    pred_target=pred_tgt.tolist(), target_name_target=tname))
    else:
        label_map = _label_map_for(cfg, summary)
        mapping = label_map.map if label_map is not None else (lambda n: n)
        for i, (src_id, tgt_id, src_ds, tgt_ds) in enumerate(
                _experiment_sides(cfg, paths, summary)):
            pair = _pair_tag(src_id, tgt_id)
            oracle = LabelOracle(load_model(
                os.path.join(paths["models"], f"{pair}.target.npz")))
            src_names = np.asarray(src_ds.label_set)
            for tag in tags:
                if not tag.startswith(pair + "."):
                    continue
                batch = load_batch(os.path.join(paths["batches"], tag),
                                   label_set=src_ds.label_set)
                true_src = src_names[batch.true_labels]
                true_tgt = np.array([mapping(n) for n in true_src])
                pred_src = src_names[batch.pred_after]
                pred_tgt = oracle.classify(batch.perturbed)
                tname_src = (src_names[batch.target_label]
                             if batch.target_label is not None else None)
                tname_tgt = mapping(tname_src) if tname_src is not None else None
                report.cells.append(TransferCell(
                    mode=cfg["mode"], attack=batch.method,
                    epsilon=batch.config.epsilon,
                    targeted=batch.target_label is not None,
                    source_id=src_id, target_id=tgt_id,
                    success_source=harness.success_score(pred_src, true_src,
                                                         tname_src),
                    success_target=harness.success_score(pred_tgt, true_tgt,
                                                         tname_tgt),
                    n=len(batch), true_source=true_src.tolist(),
                    pred_source=pred_src.tolist(), target_name_source=tname_src,
                    true_target=true_tgt.tolist(), pred_target=pred_tgt.tolist(),
                    target_name_target=tname_tgt))

    report.cells.sort(key=lambda c: (c.source_id, c.target_id, c.targeted,
                                     c.attack, c.epsilon))
    report.verify_scores()
    report.write_csv(paths["report_csv"])
    report.write_json(paths["report_json"])
    print(f"{len(report.cells)} transfer cells -> {paths['report_csv']}")
    return EXIT_OK


def cmd_analyze(cfg):
    paths = _paths(cfg)
    summary = _load_summary(paths)
    os.makedirs(paths["analysis"], exist_ok=True)
    analyze_seed = stage_seed(cfg["seed"], "analyze")
    report = TransferReport.from_json(paths["report_json"])
    written = ana.emit_heatmap_csv(report, os.path.join(paths["analysis"], "report"))

    # feature-overlap correlation: one case per (source, target) pairing of
    # targeted BIM cells (falling back to any targeted attack present)
    targeted_cells = [c for c in report.cells if c.targeted]
    overlap_doc = {"cases": [], "spearman_rho": None, "note": ""}
    if targeted_cells:
        attack = "BIM" if any(c.attack == "BIM" for c in targeted_cells) else \
            targeted_cells[0].attack
        eps = max(c.epsilon for c in targeted_cells if c.attack == attack)
        cases = []
        for c in targeted_cells:
            if c.attack != attack or c.epsilon != eps:
                continue
            if cfg["mode"] == "between_models":
                key = f"{c.target_id}.test_accuracy"
            else:
                key = f"{_pair_tag(c.source_id, c.target_id)}.target_on_source_test"
            acc = report.cross_accuracies.get(key)
            if acc is None:
                continue
            cases.append(ana.OverlapCase(f"{c.source_id}->{c.target_id}",
                                         100.0 * acc, c.success_target))
        if len(cases) >= 3:
            result = ana.overlap_correlation(cases)
            overlap_doc["cases"] = [{"name": c.name,
                                     "cross_accuracy": c.cross_accuracy,
                                     "transfer_success": c.transfer_success}
                                    for c in result.cases]
            overlap_doc["spearman_rho"] = result.spearman_rho
        else:
            overlap_doc["note"] = (f"only {len(cases)} case(s); need >= 3 "
                                   "for a rank correlation")
    else:
        overlap_doc["note"] = "no targeted cells in report"
    with open(os.path.join(paths["analysis"], "overlap.json"), "w",
              encoding="utf-8") as fh:
        json.dump(overlap_doc, fh, sort_keys=True, indent=1)

    # MDS: clean target-class samples vs. top-k adversarial samples
    embedding_path = os.path.join(paths["analysis"], "embedding.csv")
    mds_doc = _mds_scatter(cfg, paths, summary, embedding_path, analyze_seed)
    with open(os.path.join(paths["analysis"], "mds.json"), "w",
              encoding="utf-8") as fh:
        json.dump(mds_doc, fh, sort_keys=True, indent=1)
    print(f"analysis artifacts: {len(written) + 3} files under {paths['analysis']}")
    return EXIT_OK


def _mds_scatter(cfg, paths, summary, embedding_path, seed):
    with open(os.path.join(paths["batches"], "index.json"), encoding="utf-8") as fh:
        tags = json.load(fh)
    targeted_tags = [t for t in tags if t.endswith("_targeted")]
    if not targeted_tags:
        return {"note": "no targeted batches; MDS scatter skipped"}
    preferred = [t for t in targeted_tags if "BIM" in t]
    pool = preferred or targeted_tags

    def eps_of(t):
        return float(t.split("_eps")[1].split("_")[0])

    tag = max(pool, key=eps_of)
    src_label_set = summary["label_set"]["windows"]
    batch = load_batch(os.path.join(paths["batches"], tag),
                       label_set=src_label_set)

    if cfg["mode"] == "between_models":
        target_model = load_model(os.path.join(paths["models"], "DNN.npz"))
        features = read_feature_csv(paths["features"], label_set=src_label_set)
        with open(paths["feature_scaler"], encoding="utf-8") as fh:
            doc = json.load(fh)
        from advhar.features import FeatureScalerParams

        clean_ds = apply_feature_scaler(
            FeatureScalerParams(np.array(doc["minimum"]), np.array(doc["maximum"])),
            features)
        tgt_label_set = src_label_set
    else:
        sides = _experiment_sides(cfg, paths, summary)
        pair_of_tag = tag.split(".")[0]
        matches = [(i, s) for i, s in enumerate(sides)
                   if _pair_tag(s[0], s[1]) == pair_of_tag]
        side_index, (src_id, tgt_id, _, tgt_ds) = matches[0]
        pair = _pair_tag(src_id, tgt_id)
        target_model = load_model(os.path.join(paths["models"],
                                               f"{pair}.target.npz"))
        split_seed = stage_seed(cfg["seed"], "split")
        clean_ds, _ = stratified_split(tgt_ds, cfg["split"]["test_fraction"],
                                       split_seed + 2 * side_index + 1)
        tgt_label_set = tgt_ds.label_set

    label_map = _label_map_for(cfg, summary)
    src_target_name = np.asarray(summary["label_set"]["windows"])[batch.target_label]
    tgt_target_name = (label_map.map(src_target_name) if label_map is not None
                       else src_target_name)
    tgt_target_idx = tgt_label_set.index(tgt_target_name)

    clean_mask = clean_ds.labels == tgt_target_idx
    clean = clean_ds.values[clean_mask]
    if len(clean) == 0:
        return {"note": "no clean target-class samples; MDS scatter skipped"}
    k = min(cfg["analysis"]["top_k"], len(clean), len(batch))
    scores = target_model.predict_scores(batch.perturbed)
    idx = ana.topk_adversarial(batch.perturbed, scores, tgt_target_idx, k, seed)
    adv = batch.perturbed[idx]
    clean = clean[: cfg["analysis"]["top_k"]]

    stacked = np.concatenate([clean.reshape(len(clean), -1),
                              adv.reshape(len(adv), -1)])
    ids = [f"clean_{i}" for i in range(len(clean))] + \
          [f"adv_{int(j)}" for j in idx]
    mds_tags = ["clean"] * len(clean) + ["adversarial"] * len(adv)
    emb = ana.classical_mds(ana.distance_matrix(stacked, ids=ids, tags=mds_tags))
    ana.write_embedding_csv(emb, embedding_path)
    return {
        "batch": tag,
        "target_class": str(tgt_target_name),
        "k": int(k),
        "stress": emb.stress,
        "eigenvalues": emb.eigenvalues.tolist(),
        "negative_truncated": emb.negative_truncated,
        "mean_nearest_clean_distance": ana.mean_nearest_clean_distance(adv, clean),
    }


def cmd_report(cfg):
    paths = _paths(cfg)
    artifacts = {}
    for root, _, files in os.walk(paths["out"]):
        for name in sorted(files):
            if name == "manifest.json":
                continue
            full = os.path.join(root, name)
            rel = os.path.relpath(full, paths["out"])
            with open(full, "rb") as fh:
                artifacts[rel] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "config": {k: cfg[k] for k in sorted(cfg)},
        "stage_seeds": {name: stage_seed(cfg["seed"], name)
                        for name in STAGE_ORDINALS},
        "artifacts": artifacts,
    }
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    print(f"manifest: {len(artifacts)} artifacts hashed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="advhar",
        description="Adversarial transferability experiments for wearable "
                    "activity recognition.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override root seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel grid cells (default: logical CPUs)")
    return parser


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "attack": cmd_attack,
            "transfer": cmd_transfer, "analyze": cmd_analyze,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          jobs=args.jobs)
        return COMMANDS[args.stage](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # numerical / runtime failures
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
