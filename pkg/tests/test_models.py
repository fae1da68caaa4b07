"""Classifier zoo tests: interface invariants, hand-placed-point oracles,
gradient checks against finite differences, determinism, serialization."""

import numpy as np
import pytest

from advhar import trees
from advhar.dataio import apply_scaler, fit_scaler, stratified_split, synth_generate
from advhar.features import (
    FeatureDataset,
    apply_feature_scaler,
    extract_dataset,
    fit_feature_scaler,
)
from advhar.models import (
    CapabilityError,
    LRCModel,
    load_model,
    save_model,
    train_cnn,
    train_dnn,
    train_dtc,
    train_knn,
    train_lrc,
    train_rfc,
    train_svc,
)


def make_features(n_per_class=30, n_classes=3, d=45, seed=0, spread=4.0):
    """Gaussian blobs per class in feature space."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-0.8, 0.8, (n_classes, d)) * spread
    X, y = [], []
    for c in range(n_classes):
        X.append(centers[c] + rng.normal(0, 0.3, (n_per_class, d)))
        y.extend([c] * n_per_class)
    X = np.clip(np.vstack(X), -5, 5)
    n = len(y)
    return FeatureDataset(X, np.array(y), np.zeros(n, dtype=int),
                          np.full(n, "waist"), [f"class_{c}" for c in range(n_classes)])


@pytest.fixture(scope="module")
def blobs():
    return make_features()


@pytest.fixture(scope="module")
def synth_features():
    ds = synth_generate(4, 4, 12, seed=3)
    scaled = apply_scaler(fit_scaler(ds), ds)
    feats = extract_dataset(scaled)
    return apply_feature_scaler(fit_feature_scaler(feats), feats)


# ---------------------------------------------------------------------------
# interface invariants
# ---------------------------------------------------------------------------

def all_models(feats, seed=0):
    return {
        "SVC": train_svc(feats, max_iter=400),
        "RFC": train_rfc(feats, n_trees=15, seed=seed),
        "KNN": train_knn(feats, k=5),
        "DTC": train_dtc(feats),
        "LRC": train_lrc(feats, max_iter=400),
        "DNN": train_dnn(feats, seed=seed, epochs=40),
    }


def test_scores_sum_to_one_and_argmax_matches_label(blobs):
    rng = np.random.default_rng(1)
    probe = rng.uniform(-2, 2, (20, 45))
    for kind, model in all_models(blobs).items():
        scores = model.predict_scores(probe)
        assert scores.shape == (20, 3)
        assert np.max(np.abs(scores.sum(axis=1) - 1.0)) < 1e-9, kind
        assert np.array_equal(np.argmax(scores, axis=1), model.predict_label(probe)), kind


def test_uniform_scores_tie_break_to_lowest_index():
    model = LRCModel(np.zeros((4, 3)), np.zeros(3), ["a", "b", "c"])
    assert model.predict_label(np.zeros((2, 4))).tolist() == [0, 0]


def test_all_models_fit_separable_blobs(blobs):
    for kind, model in all_models(blobs).items():
        acc = model.evaluate(blobs.values, blobs.labels)
        assert acc >= 0.95, f"{kind} train accuracy {acc}"


def test_knn_k1_memorizes_training_set(blobs):
    model = train_knn(blobs, k=1)
    assert model.evaluate(blobs.values, blobs.labels) == 1.0


def test_dtc_full_growth_reaches_100_train_accuracy(synth_features):
    model = train_dtc(synth_features)
    assert model.evaluate(synth_features.values, synth_features.labels) == 1.0


def test_knn_majority_vote_hand_placed_points():
    # 3 class-1 points just beyond 2 class-0 points: k=5 vote is 3 vs 2
    X = np.zeros((6, 45))
    X[0, 0], X[1, 0] = 0.10, -0.10          # class 0, nearest
    X[2, 0], X[3, 0], X[4, 0] = 0.2, 0.3, -0.2  # class 1
    X[5, 0] = 5.0                            # far-away class 0 decoy
    y = np.array([0, 0, 1, 1, 1, 0])
    feats = FeatureDataset(X, y, np.zeros(6, dtype=int), np.full(6, "waist"),
                           ["a", "b"])
    model = train_knn(feats, k=5)
    assert model.predict_label(np.zeros((1, 45)))[0] == 1


def test_knn_k_larger_than_train_errors(blobs):
    with pytest.raises(ValueError):
        train_knn(blobs, k=10_000)


def test_empty_training_set_errors():
    empty = FeatureDataset(np.zeros((0, 45)), np.zeros(0, dtype=int),
                           np.zeros(0, dtype=int), np.array([], dtype=str), ["a"])
    for train in (train_dnn, train_dtc, train_lrc, train_svc):
        with pytest.raises(ValueError):
            train(empty)


def test_evaluate_empty_errors(blobs):
    model = train_knn(blobs, k=1)
    with pytest.raises(ValueError):
        model.evaluate(np.zeros((0, 45)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_lrc_binary_gradient_matches_logistic_formula():
    w = np.array([2.0, -1.0, 0.5])
    model = LRCModel(np.stack([np.zeros(3), w], axis=1), np.zeros(2), ["a", "b"])
    x = np.array([0.3, -0.2, 0.1])
    for y in (0, 1):
        g = model.input_gradient(x, y)
        sigma = 1.0 / (1.0 + np.exp(-(w @ x)))
        assert np.allclose(g, (sigma - y) * w)


def test_dnn_input_gradient_finite_difference(blobs):
    model = train_dnn(blobs, seed=0, epochs=5)
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, 45)
    g = model.input_gradient(x, 1)
    h = 1e-5
    from advhar.ndcore import softmax_cross_entropy
    for i in rng.integers(0, 45, size=12):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (softmax_cross_entropy(model.network.logits(xp)[0], 1)[0]
              - softmax_cross_entropy(model.network.logits(xm)[0], 1)[0]) / (2 * h)
        denom = max(abs(g[i]), abs(fd), 1e-6)
        assert abs(g[i] - fd) / denom < 1e-4


def test_nondifferentiable_kinds_raise_capability_error(blobs):
    for train in (train_knn, train_dtc):
        model = train(blobs) if train is train_dtc else train(blobs, k=3)
        with pytest.raises(CapabilityError):
            model.input_gradient(np.zeros((1, 45)), np.array([0]))


def test_svc_exposes_gradients(blobs):
    model = train_svc(blobs, max_iter=200)
    g = model.input_gradient(np.zeros((2, 45)), np.array([0, 1]))
    assert g.shape == (2, 45)
    jac = model.logit_jacobian(np.zeros(45))
    assert jac.shape == (3, 45)
    assert np.allclose(jac, model.W.T)


# ---------------------------------------------------------------------------
# training behavior
# ---------------------------------------------------------------------------

def test_dnn_training_deterministic(blobs):
    a = train_dnn(blobs, seed=5, epochs=8)
    b = train_dnn(blobs, seed=5, epochs=8)
    for pa, pb in zip(a.network.parameters(), b.network.parameters()):
        for x, y in zip(pa, pb):
            assert np.array_equal(x, y)


def test_rfc_training_deterministic(blobs):
    a = train_rfc(blobs, n_trees=8, seed=9)
    b = train_rfc(blobs, n_trees=8, seed=9)
    probe = np.random.default_rng(0).uniform(-2, 2, (10, 45))
    assert np.array_equal(a.predict_scores(probe), b.predict_scores(probe))


def test_neural_loss_decreases(blobs):
    model = train_dnn(blobs, seed=1, epochs=30)
    curve = model.train_report.loss_curve
    assert curve[-1] < curve[0]


def test_cnn_trains_on_synthetic_windows():
    ds = synth_generate(3, 3, 10, seed=7)
    scaled = apply_scaler(fit_scaler(ds), ds)
    train, test = stratified_split(scaled, seed=0)
    model = train_cnn(train, seed=0, epochs=12)
    assert model.train_report.loss_curve[-1] < model.train_report.loss_curve[0]
    assert model.evaluate(test.values, test.labels) >= 0.9


def test_cnn_one_class_is_perfect():
    ds = synth_generate(2, 1, 6, seed=8)
    scaled = apply_scaler(fit_scaler(ds), ds)
    model = train_cnn(scaled, seed=0, epochs=2)
    assert model.evaluate(scaled.values, scaled.labels) == 1.0


def test_cnn_rejects_wrong_window_shape(blobs):
    with pytest.raises(ValueError):
        train_cnn(blobs)


# ---------------------------------------------------------------------------
# tree geometry invariants
# ---------------------------------------------------------------------------

def test_leaf_boxes_tile_the_input_box(synth_features):
    model = train_dtc(synth_features)
    boxes = trees.leaf_boxes(model.root, lo=-1.0, hi=1.0, d=45)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (50, 45))
    for x in pts:
        hits = [b for b in boxes if b.contains(x)]
        assert len(hits) == 1
        assert hits[0].leaf is trees.route(model.root, x)
    # every training point lands in exactly one leaf whose histogram holds it
    for i in range(0, len(synth_features.values), 7):
        x = synth_features.values[i]
        hits = [b for b in boxes if b.contains(x)]
        assert len(hits) == 1
        assert hits[0].leaf.counts[synth_features.labels[i]] > 0


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_save_load_roundtrip_bit_exact(blobs, tmp_path):
    rng = np.random.default_rng(4)
    probe = rng.uniform(-2, 2, (12, 45))
    for kind, model in all_models(blobs, seed=2).items():
        path = tmp_path / f"{kind}.npz"
        save_model(model, path)
        back = load_model(path)
        assert back.kind == kind
        assert back.label_set == model.label_set
        assert np.array_equal(back.predict_scores(probe),
                              model.predict_scores(probe)), kind


def test_save_load_cnn_roundtrip(tmp_path):
    ds = synth_generate(2, 2, 4, seed=9)
    scaled = apply_scaler(fit_scaler(ds), ds)
    model = train_cnn(scaled, seed=1, epochs=2)
    save_model(model, tmp_path / "cnn.npz")
    back = load_model(tmp_path / "cnn.npz")
    assert np.array_equal(back.predict_scores(scaled.values),
                          model.predict_scores(scaled.values))
