"""The classifier zoo behind one uniform predict interface.

Seven kinds: a feature-space dense network (DNN), a raw-signal 1-D CNN, and
five classic feature-space classifiers (SVC, RFC, KNN, DTC, LRC). All expose
predict_scores / predict_label; the differentiable kinds (DNN, CNN, LRC and
the linear SVC) additionally expose input gradients and logit Jacobians for
the gradient-based attacks. Training is deterministic under a fixed seed and
models round-trip bit-exactly through save_model / load_model.

Ties everywhere resolve to the lowest index: argmax of scores, KNN majority
votes, and forest votes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from advhar import ndcore, trees
from advhar.ndcore import Network, adam_init, adam_step, softmax

MODEL_FORMAT_VERSION = 1


class CapabilityError(TypeError):
    """Raised when a gradient is requested from a non-differentiable model."""


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float | None = None
    loss_curve: list = field(default_factory=list)
    seed: int | None = None


class TrainedModel:
    kind = "?"
    differentiable = False

    def __init__(self, label_set, seed=None):
        self.label_set = list(label_set)
        self.seed = seed
        self.train_report = None

    @property
    def n_classes(self):
        return len(self.label_set)

    def predict_scores(self, X):
        raise NotImplementedError

    def predict_label(self, X):
        return np.argmax(self.predict_scores(X), axis=-1)

    def predict_label_names(self, X):
        return np.array([self.label_set[i] for i in self.predict_label(X)])

    def evaluate(self, X, y):
        if len(X) == 0:
            raise ValueError("cannot evaluate on an empty dataset")
        return float(np.mean(self.predict_label(X) == np.asarray(y)))

    # gradient capabilities (overridden by differentiable kinds)

    def logits(self, X):
        raise CapabilityError(f"{self.kind} does not expose logits")

    def input_gradient(self, X, labels):
        raise CapabilityError(f"{self.kind} does not expose input gradients")

    def logit_jacobian(self, X):
        raise CapabilityError(f"{self.kind} does not expose logit Jacobians")

    def logit_combination_gradient(self, X, coeffs):
        raise CapabilityError(f"{self.kind} does not expose logit gradients")


def _check_batch(X, expect_dim):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != expect_dim:
        raise ValueError(f"expected input shape (n, {expect_dim}), got {X.shape}")
    return X


# ---------------------------------------------------------------------------
# neural models
# ---------------------------------------------------------------------------

class NeuralModel(TrainedModel):
    differentiable = True

    def __init__(self, network: Network, label_set, seed, input_shape):
        super().__init__(label_set, seed)
        self.network = network
        self.input_shape = tuple(input_shape)

    def _prep(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.shape == self.input_shape
        if not single and X.shape[1:] != self.input_shape:
            raise ValueError(f"expected input shape (n, *{self.input_shape}), got {X.shape}")
        return X

    def logits(self, X):
        z, _ = self.network.logits(self._prep(X))
        return z

    def predict_scores(self, X):
        return softmax(self.logits(X))

    def input_gradient(self, X, labels):
        return self.network.input_gradient(self._prep(X), labels)

    def logit_jacobian(self, X):
        return self.network.logit_jacobian(self._prep(X))

    def logit_combination_gradient(self, X, coeffs):
        return self.network.logit_combination_gradient(self._prep(X), coeffs)


class DNNModel(NeuralModel):
    kind = "DNN"


class CNNModel(NeuralModel):
    kind = "CNN"


def _train_network(network, X, y, seed, epochs, batch_size, lr):
    rng = np.random.default_rng(seed)
    state = adam_init(network.parameters())
    params = network.parameters()
    n = len(y)
    loss_curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = network.training_gradients(X[idx], y[idx], rng=rng)
            params, state = adam_step(params, grads, state, lr)
            network.set_parameters(params)
            epoch_losses.append(loss)
        loss_curve.append(float(np.mean(epoch_losses)))
    return loss_curve


def train_dnn(features, seed=0, epochs=200, batch_size=32, lr=0.001, l2=0.001):
    """45 -> 64 -> 32 -> n_classes dense network, Adam, cross-entropy."""
    X = _check_batch(features.values, (45,))
    if len(X) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    network = ndcore.build_mlp(rng, 45, [64, 32], features.n_classes, l2=l2)
    curve = _train_network(network, X, features.labels, seed + 1, epochs, batch_size, lr)
    model = DNNModel(network, features.label_set, seed, (45,))
    model.train_report = TrainReport(model.evaluate(X, features.labels),
                                     loss_curve=curve, seed=seed)
    return model


def train_cnn(windows, seed=0, epochs=30, batch_size=32, lr=0.001, dropout=0.3):
    """conv(100,k10,s2) -> conv(50,k5,s1) -> global max pool -> dense head."""
    X = _check_batch(windows.values, (128, 3))
    if len(X) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    network = ndcore.build_cnn(rng, 128, 3, windows.n_classes, dropout=dropout)
    curve = _train_network(network, X, windows.labels, seed + 1, epochs, batch_size, lr)
    model = CNNModel(network, windows.label_set, seed, (128, 3))
    model.train_report = TrainReport(model.evaluate(X, windows.labels),
                                     loss_curve=curve, seed=seed)
    return model


# ---------------------------------------------------------------------------
# k-nearest neighbors
# ---------------------------------------------------------------------------

def squared_distances(A, B):
    """Pairwise squared Euclidean distances without the (n, m, d) temporary."""
    d2 = ((A ** 2).sum(axis=1)[:, None] + (B ** 2).sum(axis=1)[None, :]
          - 2.0 * A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


class KNNModel(TrainedModel):
    kind = "KNN"

    def __init__(self, train_X, train_y, k, label_set, seed=None):
        super().__init__(label_set, seed)
        self.train_X = np.asarray(train_X, dtype=np.float64)
        self.train_y = np.asarray(train_y, dtype=np.int64)
        self.k = int(k)

    def predict_scores(self, X):
        X = _check_batch(X, self.train_X.shape[1:])
        d2 = squared_distances(X, self.train_X)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        scores = np.zeros((len(X), self.n_classes))
        for c in range(self.n_classes):
            scores[:, c] = (self.train_y[nearest] == c).sum(axis=1)
        return scores / self.k


def train_knn(features, k=5):
    if k > len(features.values):
        raise ValueError(f"k={k} exceeds {len(features.values)} training samples")
    if len(features.values) == 0:
        raise ValueError("empty training set")
    return KNNModel(features.values, features.labels, k, features.label_set)


# ---------------------------------------------------------------------------
# decision tree / random forest
# ---------------------------------------------------------------------------

class DTCModel(TrainedModel):
    kind = "DTC"

    def __init__(self, root, label_set, seed=None):
        super().__init__(label_set, seed)
        self.root = root

    def predict_scores(self, X):
        counts = trees.predict_counts(self.root, np.asarray(X, dtype=np.float64))
        return counts / counts.sum(axis=1, keepdims=True)


class RFCModel(TrainedModel):
    kind = "RFC"

    def __init__(self, roots, label_set, seed=None):
        super().__init__(label_set, seed)
        self.roots = list(roots)

    def predict_scores(self, X):
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros((len(X), self.n_classes))
        for root in self.roots:
            counts = trees.predict_counts(root, X)
            votes[np.arange(len(X)), np.argmax(counts, axis=1)] += 1.0
        return votes / len(self.roots)


def train_dtc(features):
    if len(features.values) == 0:
        raise ValueError("empty training set")
    root = trees.grow_tree(features.values, features.labels, features.n_classes)
    model = DTCModel(root, features.label_set)
    model.train_report = TrainReport(model.evaluate(features.values, features.labels))
    return model


def train_rfc(features, n_trees=100, seed=0):
    if len(features.values) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    n, d = features.values.shape
    mtry = max(1, int(round(np.sqrt(d))))
    roots = []
    for _ in range(n_trees):
        idx = rng.integers(0, n, size=n)  # bootstrap
        roots.append(trees.grow_tree(features.values[idx], features.labels[idx],
                                     features.n_classes, rng=rng, max_features=mtry))
    model = RFCModel(roots, features.label_set, seed)
    model.train_report = TrainReport(model.evaluate(features.values, features.labels),
                                     seed=seed)
    return model


# ---------------------------------------------------------------------------
# linear models (logistic regression, linear hinge SVC)
# ---------------------------------------------------------------------------

class LinearModel(TrainedModel):
    """Margins m = xW + b; scores are softmax(m), so the cross-entropy input
    gradient has the closed form W (softmax - onehot)."""

    differentiable = True

    def __init__(self, W, b, label_set, seed=None):
        super().__init__(label_set, seed)
        self.W = np.asarray(W, dtype=np.float64)  # (d, c)
        self.b = np.asarray(b, dtype=np.float64)

    def margins(self, X):
        X = _check_batch(X, (self.W.shape[0],))
        return X @ self.W + self.b

    def logits(self, X):
        return self.margins(X)

    def predict_scores(self, X):
        return softmax(self.margins(X))

    def input_gradient(self, X, labels):
        single = np.asarray(X).ndim == 1
        Xb = np.atleast_2d(X)
        labels = np.atleast_1d(labels)
        p = softmax(self.margins(Xb))
        p[np.arange(len(labels)), labels] -= 1.0
        g = p @ self.W.T
        return g[0] if single else g

    def logit_jacobian(self, X):
        single = np.asarray(X).ndim == 1
        n = 1 if single else len(X)
        jac = np.broadcast_to(self.W.T, (n, *self.W.T.shape)).copy()
        return jac[0] if single else jac

    def logit_combination_gradient(self, X, coeffs):
        single = np.asarray(X).ndim == 1
        g = np.atleast_2d(coeffs) @ self.W.T
        return g[0] if single else g


class LRCModel(LinearModel):
    kind = "LRC"


class SVCModel(LinearModel):
    kind = "SVC"


def train_lrc(features, max_iter=5000, tol=1e-7, C=1.0):
    """Multinomial logistic regression by gradient descent with backtracking."""
    X = np.asarray(features.values, dtype=np.float64)
    y = features.labels
    if len(X) == 0:
        raise ValueError("empty training set")
    n, d = X.shape
    c = features.n_classes
    lam = 1.0 / (C * n)
    W = np.zeros((d, c))
    b = np.zeros(c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    def objective(W, b):
        z = X @ W + b
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        ce = np.mean(lse - z[np.arange(n), y])
        return ce + 0.5 * lam * float(np.sum(W * W))

    step = 1.0
    f = objective(W, b)
    for _ in range(max_iter):
        p = softmax(X @ W + b)
        gW = X.T @ (p - onehot) / n + lam * W
        gb = (p - onehot).mean(axis=0)
        gnorm2 = float(np.sum(gW * gW) + np.sum(gb * gb))
        if np.sqrt(gnorm2) < tol:
            break
        # backtracking line search (Armijo)
        step = min(step * 2.0, 1e4)
        while step > 1e-12:
            f_new = objective(W - step * gW, b - step * gb)
            if f_new <= f - 0.5 * step * gnorm2:
                break
            step *= 0.5
        W -= step * gW
        b -= step * gb
        f = objective(W, b)
    model = LRCModel(W, b, features.label_set)
    model.train_report = TrainReport(model.evaluate(X, y))
    return model


def train_svc(features, max_iter=5000, C=1.0):
    """One-vs-rest linear hinge SVM by full-batch subgradient descent."""
    X = np.asarray(features.values, dtype=np.float64)
    y = features.labels
    if len(X) == 0:
        raise ValueError("empty training set")
    n, d = X.shape
    c = features.n_classes
    lam = 1.0 / (C * n)
    S = -np.ones((n, c))
    S[np.arange(n), y] = 1.0
    W = np.zeros((d, c))
    b = np.zeros(c)

    def objective(W, b):
        hinge = np.maximum(0.0, 1.0 - S * (X @ W + b))
        return float(hinge.sum(axis=1).mean()) + 0.5 * lam * float(np.sum(W * W))

    best = (objective(W, b), W.copy(), b.copy())
    for t in range(1, max_iter + 1):
        active = (S * (X @ W + b)) < 1.0
        gW = lam * W - X.T @ (S * active) / n
        gb = -(S * active).mean(axis=0)
        step = 1.0 / (1.0 + t / 100.0)
        W -= step * gW
        b -= step * gb
        f = objective(W, b)
        if f < best[0]:
            best = (f, W.copy(), b.copy())
    model = SVCModel(best[1], best[2], features.label_set)
    model.train_report = TrainReport(model.evaluate(X, y))
    return model


# ---------------------------------------------------------------------------
# the whole feature-space zoo at once
# ---------------------------------------------------------------------------

FEATURE_MODEL_KINDS = ("SVC", "RFC", "KNN", "DTC", "LRC", "DNN")


def train_feature_zoo(train_features, seed=0, dnn_epochs=200, rfc_trees=100):
    """Train the six feature-space classifiers on one shared training split."""
    return {
        "SVC": train_svc(train_features),
        "RFC": train_rfc(train_features, n_trees=rfc_trees, seed=seed),
        "KNN": train_knn(train_features, k=5),
        "DTC": train_dtc(train_features),
        "LRC": train_lrc(train_features),
        "DNN": train_dnn(train_features, seed=seed, epochs=dnn_epochs),
    }


# ---------------------------------------------------------------------------
# serialization (versioned npz, bit-exact round trip)
# ---------------------------------------------------------------------------

def _network_spec(network):
    spec = []
    for layer in network.layers:
        entry = {"kind": layer.kind}
        if layer.kind == "dense":
            entry["l2"] = layer.l2
        elif layer.kind == "conv1d":
            entry["stride"] = layer.stride
        elif layer.kind == "dropout":
            entry["rate"] = layer.rate
        spec.append(entry)
    return spec


def _network_from_spec(spec, arrays):
    layers = []
    i = 0
    for entry in spec:
        kind = entry["kind"]
        if kind == "dense":
            layers.append(ndcore.Dense(arrays[f"p{i}"], arrays[f"p{i+1}"],
                                       l2=entry["l2"]))
            i += 2
        elif kind == "conv1d":
            layers.append(ndcore.Conv1D(arrays[f"p{i}"], arrays[f"p{i+1}"],
                                        stride=entry["stride"]))
            i += 2
        elif kind == "relu":
            layers.append(ndcore.ReLU())
        elif kind == "globalmaxpool1d":
            layers.append(ndcore.GlobalMaxPool1D())
        elif kind == "dropout":
            layers.append(ndcore.Dropout(entry["rate"]))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers)


def save_model(model, path):
    meta = {"version": MODEL_FORMAT_VERSION, "kind": model.kind,
            "label_set": model.label_set, "seed": model.seed}
    arrays = {}
    if isinstance(model, NeuralModel):
        meta["input_shape"] = list(model.input_shape)
        meta["layers"] = _network_spec(model.network)
        i = 0
        for layer_params in model.network.parameters():
            for p in layer_params:
                arrays[f"p{i}"] = p
                i += 1
    elif isinstance(model, KNNModel):
        meta["k"] = model.k
        arrays["train_X"] = model.train_X
        arrays["train_y"] = model.train_y
    elif isinstance(model, DTCModel):
        arrays.update(trees.tree_to_arrays(model.root))
    elif isinstance(model, RFCModel):
        meta["n_trees"] = len(model.roots)
        for t, root in enumerate(model.roots):
            for key, arr in trees.tree_to_arrays(root).items():
                arrays[f"t{t}_{key}"] = arr
    elif isinstance(model, LinearModel):
        arrays["W"] = model.W
        arrays["b"] = model.b
    else:
        raise ValueError(f"cannot serialize model kind {model.kind!r}")
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        **arrays)


def load_model(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta["version"] != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {meta['version']}")
        kind = meta["kind"]
        label_set = meta["label_set"]
        seed = meta["seed"]
        if kind in ("DNN", "CNN"):
            arrays = {k: data[k] for k in data.files if k.startswith("p")}
            network = _network_from_spec(meta["layers"], arrays)
            cls = DNNModel if kind == "DNN" else CNNModel
            return cls(network, label_set, seed, tuple(meta["input_shape"]))
        if kind == "KNN":
            return KNNModel(data["train_X"], data["train_y"], meta["k"],
                            label_set, seed)
        if kind == "DTC":
            arrays = {k: data[k] for k in ("feature", "threshold", "left",
                                           "right", "counts")}
            return DTCModel(trees.tree_from_arrays(arrays), label_set, seed)
        if kind == "RFC":
            roots = []
            for t in range(meta["n_trees"]):
                arrays = {k: data[f"t{t}_{k}"] for k in
                          ("feature", "threshold", "left", "right", "counts")}
                roots.append(trees.tree_from_arrays(arrays))
            return RFCModel(roots, label_set, seed)
        if kind in ("LRC", "SVC"):
            cls = LRCModel if kind == "LRC" else SVCModel
            return cls(data["W"], data["b"], label_set, seed)
    raise ValueError(f"unknown model kind {kind!r}")
