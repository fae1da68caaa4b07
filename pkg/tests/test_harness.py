"""Harness tests: success-score counting oracle, the black-box seal, report
consistency and determinism, and the experiment-level transfer properties."""

import numpy as np
import pytest

import advhar.harness as harness
from advhar.dataio import default_label_map, synth_generate
from advhar.harness import (
    ConfigError,
    LabelOracle,
    TransferReport,
    run_across_locations,
    run_across_subjects,
    run_between_datasets,
    run_between_models,
    success_score,
)
from advhar.models import train_knn


# ---------------------------------------------------------------------------
# success score
# ---------------------------------------------------------------------------

def test_success_score_all_flipped_is_100():
    truths = np.array(["a", "b", "a", "b"])
    preds = np.array(["b", "a", "b", "a"])
    assert success_score(preds, truths) == 100.0


def test_success_score_complement_of_accuracy():
    rng = np.random.default_rng(0)
    truths = rng.integers(0, 3, 50)
    preds = rng.integers(0, 3, 50)
    acc = float(np.mean(preds == truths))
    assert success_score(preds, truths) == pytest.approx(100.0 - acc * 100.0)


def test_success_score_against_hand_count_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        truths = rng.integers(0, 4, 20)
        preds = rng.integers(0, 4, 20)
        target = int(rng.integers(0, 4))
        # counting oracle, written longhand
        wrong = sum(1 for p, t in zip(preds, truths) if p != t)
        assert success_score(preds, truths) == 100.0 * wrong / 20

        kept = [(p, t) for p, t in zip(preds, truths) if t != target]
        hits = sum(1 for p, _ in kept if p == target)
        if kept:
            expected = 100.0 * hits / len(kept)
            assert success_score(preds, truths, target) == expected


def test_success_score_targeted_excludes_target_class_samples():
    truths = np.array([0, 0, 1, 1])
    preds = np.array([1, 0, 1, 1])
    # samples with truth==1 drop out; one of two class-0 samples hits target 1
    assert success_score(preds, truths, target=1) == 50.0


def test_success_score_empty_errors():
    with pytest.raises(ValueError):
        success_score(np.array([]), np.array([]))
    with pytest.raises(ValueError):
        success_score(np.array([1]), np.array([1]), target=1)


# ---------------------------------------------------------------------------
# the label oracle
# ---------------------------------------------------------------------------

def _tiny_knn():
    from tests.test_models import make_features

    feats = make_features(n_per_class=10, n_classes=2, seed=0)
    return train_knn(feats, k=3), feats


def test_oracle_returns_labels_and_logs_queries():
    model, feats = _tiny_knn()
    oracle = LabelOracle(model)
    out = oracle.classify(feats.values[:7])
    assert out.tolist() == model.predict_label_names(feats.values[:7]).tolist()
    assert oracle.query_log == [7]
    oracle.classify(feats.values[:3])
    assert oracle.query_count == 10


def test_oracle_reproduces_target_accuracy():
    model, feats = _tiny_knn()
    oracle = LabelOracle(model)
    preds = oracle.classify(feats.values)
    truth = feats.label_names()
    assert float(np.mean(preds == truth)) == model.evaluate(feats.values, feats.labels)


def test_oracle_exposes_no_scores_or_gradients():
    model, _ = _tiny_knn()
    oracle = LabelOracle(model)
    for forbidden in ("predict_scores", "predict_label", "input_gradient",
                      "logits", "logit_jacobian", "network", "W"):
        assert not hasattr(oracle, forbidden)
    public = {name for name in dir(oracle) if not name.startswith("_")}
    assert public == {"classify", "query_log", "query_count"}


# ---------------------------------------------------------------------------
# black-box seal
# ---------------------------------------------------------------------------

def test_blackbox_seal_no_oracle_queries_during_generation(synth_windows, monkeypatch):
    """Interleave a global event log between attack generation and oracle
    queries; every query must come after the cell's generation finished."""
    events = []

    real_generate = harness.generate

    def spy_generate(model, x, y, cfg):
        events.append(("generate_start", cfg.method, cfg.epsilon))
        out = real_generate(model, x, y, cfg)
        events.append(("generate_end", cfg.method, cfg.epsilon))
        return out

    class SpyOracle(LabelOracle):
        def classify(self, batch):
            events.append(("query",))
            return super().classify(batch)

    monkeypatch.setattr(harness, "generate", spy_generate)
    monkeypatch.setattr(harness, "LabelOracle", SpyOracle)

    run_across_subjects(synth_windows, seed=3, methods=("FGSM", "BIM"),
                        epsilons=(0.5,), targeted_modes=(False,),
                        iterations=5, cnn_epochs=4, max_samples=60, jobs=1)

    assert any(e[0] == "query" for e in events)
    open_generation = False
    for e in events:
        if e[0] == "generate_start":
            open_generation = True
        elif e[0] == "generate_end":
            open_generation = False
        elif e[0] == "query":
            assert not open_generation, "oracle query during attack generation"


# ---------------------------------------------------------------------------
# experiments on synthetic data
# ---------------------------------------------------------------------------

def test_across_subjects_report_structure(subjects_report):
    report = subjects_report
    assert report.mode == "across_subjects"
    assert len(report.cells) == 4 * 2  # 4 epsilons x (untargeted, targeted)
    for cell in report.cells:
        assert 0.0 <= cell.success_source <= 100.0
        assert 0.0 <= cell.success_target <= 100.0
        assert cell.n > 0
    assert report.verify_scores()


def test_across_subjects_source_dominates_target_at_half_epsilon(subjects_report):
    cells = [c for c in subjects_report.cells
             if not c.targeted and c.epsilon == 0.5 and c.attack == "BIM"]
    assert len(cells) == 1
    assert cells[0].success_source >= cells[0].success_target


def test_untargeted_success_monotone_in_epsilon(subjects_report):
    for targeted in (False,):
        scores = [c.success_source for c in subjects_report.cells
                  if c.targeted == targeted]
        eps = [c.epsilon for c in subjects_report.cells if c.targeted == targeted]
        ordered = [s for _, s in sorted(zip(eps, scores))]
        assert all(a <= b + 1e-9 for a, b in zip(ordered, ordered[1:]))


def test_across_subjects_deterministic(synth_windows):
    kwargs = dict(seed=11, methods=("FGSM",), epsilons=(0.25,),
                  targeted_modes=(False,), cnn_epochs=3, max_samples=40)
    a = run_across_subjects(synth_windows, **kwargs)
    b = run_across_subjects(synth_windows, **kwargs)
    assert a.to_dict() == b.to_dict()


def test_between_models_matrix(synth_raw_features):
    report = run_between_models(
        synth_raw_features, seed=5, methods=("FGSM", "BIM"), epsilons=(0.5,),
        targeted_modes=(False, True), target_class="class_0",
        iterations=10, dnn_epochs=40, max_samples=100,
        include_nonparametric=True)
    kinds = {c.target_id for c in report.cells}
    assert kinds == {"SVC", "RFC", "KNN", "DTC", "LRC", "DNN"}
    sources = {c.source_id for c in report.cells}
    assert sources == {"DNN", "DTC", "KNN"}
    # DNN white-box row exists and self-transfer is recorded
    self_cells = [c for c in report.cells
                  if c.source_id == "DNN" and c.target_id == "DNN"
                  and not c.targeted and c.attack == "BIM"]
    assert self_cells and self_cells[0].success_source == self_cells[0].success_target
    assert report.verify_scores()
    assert set(report.cross_accuracies) >= {"DNN_test", "DTC_train"}
    assert report.cross_accuracies["DTC_train"] == 1.0


def test_between_models_dnn_self_transfer_dominates(synth_raw_features):
    report = run_between_models(
        synth_raw_features, seed=6, methods=("BIM",), epsilons=(0.5,),
        targeted_modes=(False,), iterations=10, dnn_epochs=60, max_samples=120)
    cells = {c.target_id: c for c in report.cells}
    for kind, cell in cells.items():
        if kind != "DNN":
            assert cells["DNN"].success_target >= cell.success_target - 1e-9


def test_across_locations_runs_per_pair():
    ds = synth_generate(4, 4, 8, seed=2)
    positions = np.array(["chest", "right_wrist"] * (len(ds) // 2))
    ds.positions = positions
    reports = run_across_locations(
        ds, pairs=[("chest", "right_wrist"), ("right_wrist", "chest")],
        seed=1, methods=("FGSM",), epsilons=(0.5,), targeted_modes=(False,),
        cnn_epochs=3, max_samples=40)
    assert [r.config["source_id"] for r in reports] == ["chest", "right_wrist"]
    with pytest.raises(ConfigError):
        run_across_locations(ds, pairs=[("chest", "waist")], seed=1,
                             cnn_epochs=2)


def test_between_datasets_label_mapping():
    src = synth_generate(3, 4, 8, seed=3)
    tgt = synth_generate(3, 4, 8, seed=4)
    # map only half of the source classes into the target vocabulary
    label_map = {"class_0": "class_1", "class_1": "class_0"}
    report = run_between_datasets(
        src, tgt, label_map, seed=2, methods=("FGSM",), epsilons=(0.25, 0.9),
        targeted_modes=(False, True), target_class="class_0",
        cnn_epochs=4, max_samples=60)
    for cell in report.cells:
        assert set(cell.true_target) <= {"class_0", "class_1"}
        if cell.targeted:
            assert cell.target_name_source == "class_0"
            assert cell.target_name_target == "class_1"
    assert report.verify_scores()


def test_between_datasets_rejects_unshared_target():
    src = synth_generate(2, 3, 6, seed=5)
    tgt = synth_generate(2, 3, 6, seed=6)
    with pytest.raises(ConfigError):
        run_between_datasets(src, tgt, {"class_0": "class_0"}, seed=0,
                             target_class="class_2", cnn_epochs=2)


def test_default_label_maps_cover_shared_activities():
    m = default_label_map("UCI", "MHEALTH")
    assert m.map("Sitting") == "Sitting and relaxing"
    assert m.map("Walking") == "Walking"
    m = default_label_map("DL", "UCI")
    assert m.map("Climbing stairs") == "Walking Upstairs"


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def test_report_csv_and_json_roundtrip(subjects_report, tmp_path):
    report = subjects_report
    csv_path = tmp_path / "report.csv"
    json_path = tmp_path / "report.json"
    report.write_csv(csv_path)
    report.write_json(json_path)

    lines = csv_path.read_text().splitlines()
    assert lines[0] == TransferReport.CSV_HEADER
    assert len(lines) == 1 + len(report.cells)

    back = TransferReport.from_json(json_path)
    assert back.to_dict() == report.to_dict()
    assert back.verify_scores()


def test_report_scores_recomputable_from_predictions(subjects_report):
    cell = subjects_report.cells[0]
    s, t = cell.recompute()
    assert s == cell.success_source
    assert t == cell.success_target
