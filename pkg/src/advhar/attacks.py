"""Adversarial example generation.

Five gradient methods (FGSM, BIM, MIM, JSMA, CW) against any differentiable
model, two decision-tree attacks (exact region-based and the heuristic
leaf-search), and a kernel-substitution attack for nearest-neighbor models.

Shared contract: every method perturbs within an l-infinity budget epsilon
and clips into the data range (default [-1, 1]). The tree attacks report
per-sample infeasibility instead of ever exceeding the budget. sign(0) = 0
everywhere, and BIM with one iteration reproduces FGSM bitwise, as does MIM
with zero momentum decay reproduce BIM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from advhar import trees
from advhar.models import CapabilityError, DTCModel, KNNModel, squared_distances

METHODS = ("FGSM", "BIM", "MIM", "JSMA", "CW",
           "DT_REGION", "DT_PAPERNOT", "KNN_KSUB")
GRADIENT_METHODS = ("FGSM", "BIM", "MIM", "JSMA", "CW")

DEFAULT_ITERATIONS = {"FGSM": 1, "BIM": 50, "MIM": 50, "JSMA": 50, "CW": 200,
                      "DT_REGION": 1, "DT_PAPERNOT": 1, "KNN_KSUB": 1}

THRESHOLD_NUDGE = 1e-6
BUDGET_SLACK = 1e-9


class InfeasibleAttackError(RuntimeError):
    """No qualifying decision region exists for a tree-based attack."""


@dataclass
class AttackConfig:
    method: str
    epsilon: float
    iterations: int | None = None      # per-method default when None
    alpha: float | None = None         # step size; defaults to epsilon/iterations
    target_label: int | None = None    # None = untargeted
    clip: tuple = (-1.0, 1.0)
    cw_const: float = 1.0
    cw_lr: float = 0.01
    mim_decay: float = 1.0
    jsma_theta: float | None = None    # defaults to alpha, then epsilon/10
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations is None:
            self.iterations = DEFAULT_ITERATIONS[self.method]
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def targeted(self):
        return self.target_label is not None

    @property
    def step(self):
        return self.alpha if self.alpha is not None else self.epsilon / self.iterations


@dataclass
class AdversarialBatch:
    """Originals paired with their perturbed copies plus bookkeeping."""

    method: str
    config: AttackConfig
    originals: np.ndarray
    perturbed: np.ndarray
    true_labels: np.ndarray
    target_label: int | None
    pred_before: np.ndarray
    pred_after: np.ndarray
    feasible: np.ndarray = None  # tree attacks may fail per sample

    def __post_init__(self):
        if self.feasible is None:
            self.feasible = np.ones(len(self.originals), dtype=bool)

    def __len__(self):
        return len(self.originals)

    def validate(self):
        if self.perturbed.shape != self.originals.shape:
            raise ValueError("perturbed/original shape mismatch")
        lo, hi = self.config.clip
        if self.perturbed.min() < lo - BUDGET_SLACK or self.perturbed.max() > hi + BUDGET_SLACK:
            raise ValueError("perturbed values escape the clip range")
        delta = np.abs(self.perturbed - self.originals).reshape(len(self), -1).max(axis=1)
        if np.any(delta > self.config.epsilon + BUDGET_SLACK):
            raise ValueError("perturbation exceeds the epsilon budget")
        if np.any(np.abs(self.perturbed[~self.feasible]
                         - self.originals[~self.feasible]) > 0):
            raise ValueError("infeasible samples must stay unperturbed")
        return self


def _labels_for(cfg, y):
    if cfg.targeted:
        return np.full(len(y), cfg.target_label, dtype=np.int64)
    return np.asarray(y, dtype=np.int64)


def _budget_clip(adv, x, cfg):
    lo, hi = cfg.clip
    adv = np.clip(adv, x - cfg.epsilon, x + cfg.epsilon)
    return np.clip(adv, lo, hi)


# ---------------------------------------------------------------------------
# gradient methods
# ---------------------------------------------------------------------------

def fgsm(model, x, y, cfg):
    """Single gradient-sign step: ascend the true-class loss, or descend the
    target-class loss when a target label is set."""
    x = np.asarray(x, dtype=np.float64)
    labels = _labels_for(cfg, y)
    grad = model.input_gradient(x, labels)
    sign = -1.0 if cfg.targeted else 1.0
    adv = x + sign * cfg.epsilon * np.sign(grad)
    lo, hi = cfg.clip
    return np.clip(adv, lo, hi)


def bim(model, x, y, cfg):
    """Iterated FGSM with per-step clipping into the epsilon box; the
    gradient is recomputed at the current iterate each step."""
    x = np.asarray(x, dtype=np.float64)
    labels = _labels_for(cfg, y)
    sign = -1.0 if cfg.targeted else 1.0
    alpha = cfg.step
    adv = x.copy()
    for _ in range(cfg.iterations):
        grad = model.input_gradient(adv, labels)
        adv = _budget_clip(adv + sign * alpha * np.sign(grad), x, cfg)
    return adv


def mim(model, x, y, cfg):
    """BIM with an accumulated velocity over l1-normalized gradients."""
    x = np.asarray(x, dtype=np.float64)
    labels = _labels_for(cfg, y)
    sign = -1.0 if cfg.targeted else 1.0
    alpha = cfg.step
    adv = x.copy()
    velocity = np.zeros_like(x)
    for _ in range(cfg.iterations):
        grad = model.input_gradient(adv, labels)
        l1 = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
        l1 = l1.reshape((-1,) + (1,) * (grad.ndim - 1))
        normed = np.divide(grad, l1, out=np.zeros_like(grad), where=l1 > 0)
        velocity = cfg.mim_decay * velocity + normed
        adv = _budget_clip(adv + sign * alpha * np.sign(velocity), x, cfg)
    return adv


def jsma(model, x, y, cfg):
    """Saliency-map attack: one feature per iteration is pushed by +theta
    toward the target class, chosen from the logit Jacobian.

    Untargeted mode targets each wrong class in label order, keeps the first
    success per sample, and falls back to the highest-true-loss candidate.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if cfg.targeted:
        return _jsma_targeted(model, x, cfg.target_label, cfg)

    n_classes = len(model.label_set)
    best = x.copy()
    best_loss = np.full(len(x), -np.inf)
    done = np.zeros(len(x), dtype=bool)
    for c in range(n_classes):
        idx = np.where(~done & (y != c))[0]
        if len(idx) == 0:
            continue
        cand = _jsma_targeted(model, x[idx], c, cfg)
        pred = model.predict_label(cand)
        loss = _true_class_loss(model, cand, y[idx])
        success = pred == c
        improve = ~success & (loss > best_loss[idx])
        take = success | improve
        rows = idx[take]
        best[rows] = cand[take]
        best_loss[rows] = np.where(success[take], np.inf, loss[take])
        done[idx[success]] = True
    return best


def _true_class_loss(model, x, y):
    scores = model.predict_scores(np.atleast_2d(x))
    return -np.log(np.maximum(scores[np.arange(len(y)), y], 1e-300))


def _jsma_targeted(model, x, target, cfg):
    adv = x.copy()
    n = len(adv)
    flat = adv.reshape(n, -1)
    x_flat = x.reshape(n, -1)
    lo, hi = cfg.clip
    ceil = np.minimum(x_flat + cfg.epsilon, hi)
    theta = cfg.jsma_theta
    if theta is None:
        theta = cfg.alpha if cfg.alpha is not None else cfg.epsilon / 10.0

    active = np.where(model.predict_label(adv) != target)[0]
    for _ in range(cfg.iterations):
        if len(active) == 0:
            break
        jac = model.logit_jacobian(adv[active]).reshape(len(active), -1, flat.shape[1])
        toward = jac[:, target, :]
        away = jac.sum(axis=1) - toward
        headroom = flat[active] < ceil[active] - 1e-12
        qualifying = (toward > 0) & (away < 0) & headroom
        score = np.where(qualifying, toward * np.abs(away), -np.inf)
        pick = np.argmax(score, axis=1)
        has_pick = np.isfinite(score[np.arange(len(active)), pick])
        rows = active[has_pick]
        cols = pick[has_pick]
        if len(rows) == 0:
            break  # saliency map empty: stop with best-effort iterates
        flat[rows, cols] = np.minimum(flat[rows, cols] + theta, ceil[rows, cols])
        still = model.predict_label(adv[rows]) != target
        active = rows[still]
    return _budget_clip(adv, x, cfg)


def cw_l2(model, x, y, cfg, kappa=0.0):
    """Carlini-Wagner style l2 attack under a tanh reparameterization.

    Minimizes ||adv - x||_2^2 + c * hinge(logits) with Adam; the best iterate
    (smallest l2 among successes, else smallest objective) is kept. The
    result is then projected into the shared epsilon/clip budget so every
    method reports under one perturbation semantics.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lo, hi = cfg.clip
    mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
    n = len(x)
    axes = tuple(range(1, x.ndim))

    w = np.arctanh(np.clip((x - mid) / half, -1 + 1e-6, 1 - 1e-6))
    target = cfg.target_label

    def evaluate(adv):
        z = model.logits(adv)
        if cfg.targeted:
            z_t = z[:, target]
            masked = z.copy()
            masked[:, target] = -np.inf
            j_other = np.argmax(masked, axis=1)
            margin = masked[np.arange(n), j_other] - z_t
            coeffs = np.zeros_like(z)
            live = margin > -kappa
            coeffs[np.arange(n), j_other] = live.astype(float)
            coeffs[np.arange(n), target] -= live.astype(float)
            success = np.argmax(z, axis=1) == target
        else:
            z_y = z[np.arange(n), y]
            masked = z.copy()
            masked[np.arange(n), y] = -np.inf
            j_other = np.argmax(masked, axis=1)
            margin = z_y - masked[np.arange(n), j_other]
            coeffs = np.zeros_like(z)
            live = margin > -kappa
            coeffs[np.arange(n), y] = live.astype(float)
            coeffs[np.arange(n), j_other] -= live.astype(float)
            success = np.argmax(z, axis=1) != y
        hinge = np.maximum(margin, -kappa)
        return hinge, coeffs, success

    # the untouched input is candidate zero: with c=0 nothing can beat it
    best_adv = x.copy()
    hinge0, _, success0 = evaluate(x)
    best_success = success0
    best_key = np.where(success0, 0.0, cfg.cw_const * hinge0)

    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, cfg.iterations + 1):
        adv = np.tanh(w) * half + mid
        delta = adv - x
        l2 = (delta ** 2).sum(axis=axes)
        hinge, coeffs, success = evaluate(adv)
        objective = l2 + cfg.cw_const * hinge

        key = np.where(success, l2, objective)
        better = (success & ~best_success) | ((success == best_success) & (key < best_key))
        best_adv[better] = adv[better]
        best_key[better] = key[better]
        best_success |= success

        grad_hinge = model.logit_combination_gradient(adv, coeffs)
        grad_adv = 2.0 * delta + cfg.cw_const * grad_hinge
        grad_w = grad_adv * half * (1.0 - np.tanh(w) ** 2)

        m = 0.9 * m + 0.1 * grad_w
        v = 0.999 * v + 0.001 * grad_w ** 2
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        w = w - cfg.cw_lr * m_hat / (np.sqrt(v_hat) + 1e-8)

    return _budget_clip(best_adv, x, cfg)


# ---------------------------------------------------------------------------
# decision-tree attacks
# ---------------------------------------------------------------------------

def _qualifying_boxes(model, cfg, d):
    lo, hi = cfg.clip
    boxes = trees.leaf_boxes(model.root, lo=lo, hi=hi, d=d)
    out = []
    for box in boxes:
        eff_lower = np.where(box.lower_open, box.lower + THRESHOLD_NUDGE, box.lower)
        if np.any(eff_lower > box.upper):
            continue  # numerically empty after nudging
        out.append((box, eff_lower))
    if not out:
        raise InfeasibleAttackError("tree has no non-empty leaf region")
    return out


def dt_region(model, x, y, cfg):
    """Exact region-based attack on a single tree.

    Every qualifying leaf's decision-path box is an axis-aligned region; the
    closest point of each is the per-coordinate clamp of x (open thresholds
    nudged inward). Returns the global minimum-l-infinity point per sample
    plus its distance; success requires distance <= epsilon.
    """
    if not isinstance(model, DTCModel):
        raise CapabilityError("region-based attack needs a decision tree model")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    best = x.copy()
    best_dist = np.full(n, np.inf)
    for box, eff_lower in _qualifying_boxes(model, cfg, d):
        if cfg.targeted:
            mask = np.full(n, box.label == cfg.target_label)
        else:
            mask = box.label != y
        if not np.any(mask):
            continue
        cand = np.clip(x, eff_lower, box.upper)
        dist = np.abs(cand - x).max(axis=1)
        better = mask & (dist < best_dist)
        best[better] = cand[better]
        best_dist[better] = dist[better]
    if np.all(np.isinf(best_dist)):
        raise InfeasibleAttackError("no qualifying leaf for any sample")
    return best, best_dist


def dt_papernot(model, x, y, cfg):
    """Heuristic leaf-search attack: breadth-first search the tree graph from
    each sample's own leaf for the nearest qualifying leaf, then adjust only
    the features on the connecting path to just satisfy its constraints."""
    if not isinstance(model, DTCModel):
        raise CapabilityError("leaf-search attack needs a decision tree model")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lo, hi = cfg.clip
    root = model.root
    adj = trees.tree_adjacency(root)
    by_id = trees.nodes_by_id(root)
    out = x.copy()
    feasible = np.zeros(len(x), dtype=bool)
    for i in range(len(x)):
        leaf0 = trees.route(root, x[i])
        want = ((lambda lab: lab == cfg.target_label) if cfg.targeted
                else (lambda lab: lab != y[i]))
        path0 = {node.node_id for node, _ in trees.leaf_path(root, leaf0.node_id)}
        path0.add(leaf0.node_id)
        queue = [leaf0.node_id]
        seen = {leaf0.node_id}
        found = None
        while queue:
            nid = queue.pop(0)
            node = by_id[nid]
            if node.is_leaf and want(int(np.argmax(node.counts))):
                cand = _papernot_candidate(root, x[i], nid, lo, hi)
                if cand is not None:
                    found = cand
                    break
            for nb in adj[nid]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        if found is not None:
            out[i] = found
            feasible[i] = True
    if not np.any(feasible):
        raise InfeasibleAttackError("no reachable adversarial leaf for any sample")
    dist = np.abs(out - x).max(axis=1)
    return out, np.where(feasible, dist, np.inf)


def _papernot_candidate(root, x, leaf_id, lo, hi):
    path = trees.leaf_path(root, leaf_id)
    adv = x.copy()
    for node, went_left in path:
        f, thr = node.feature, node.threshold
        if went_left and adv[f] > thr:
            adv[f] = thr - THRESHOLD_NUDGE
        elif not went_left and adv[f] <= thr:
            adv[f] = thr + THRESHOLD_NUDGE
    np.clip(adv, lo, hi, out=adv)
    if trees.route(root, adv).node_id == leaf_id:
        return adv
    return None  # clipping broke a constraint; caller keeps searching


# ---------------------------------------------------------------------------
# kernel substitution for KNN
# ---------------------------------------------------------------------------

def knn_surrogate_gradient(model, x, y, train_X=None, train_y=None):
    """Cross-entropy gradient of a soft nearest-neighbor surrogate.

    Class scores are sums of Gaussian kernels over same-class training
    points, with bandwidth gamma = mean squared nearest-neighbor distance;
    computed in log space so far-away queries stay stable.
    """
    T = model.train_X if train_X is None else np.asarray(train_X, dtype=np.float64)
    ty = model.train_y if train_y is None else np.asarray(train_y, dtype=np.int64)
    d2 = squared_distances(T, T)
    np.fill_diagonal(d2, np.inf)
    gamma = float(d2.min(axis=1).mean())
    if gamma == 0.0:
        raise ValueError("degenerate kernel bandwidth: duplicated training points")

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = len(x)
    n_classes = len(model.label_set)
    logz = np.full((n, n_classes), -np.inf)
    grad_z = np.zeros((n_classes, n, x.shape[1]))
    for c in range(n_classes):
        members = T[ty == c]
        if len(members) == 0:
            continue
        a = -squared_distances(x, members) / gamma
        m = a.max(axis=1, keepdims=True)
        logz[:, c] = (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]
        weights = np.exp(a - m)
        weights /= weights.sum(axis=1, keepdims=True)
        grad_z[c] = -2.0 / gamma * (x - weights @ members)
    p = np.exp(logz - logz.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    coeff = p.copy()
    coeff[np.arange(n), y] -= 1.0
    return np.einsum("nc,cnd->nd", coeff, grad_z)


def knn_ksub(model, x, y, cfg, train_X=None, train_y=None):
    """FGSM (untargeted semantics) on the differentiable KNN surrogate."""
    if not isinstance(model, KNNModel):
        raise CapabilityError("kernel substitution attack needs a KNN model")
    if cfg.targeted:
        raise ValueError("kernel substitution attack is untargeted only")
    x = np.asarray(x, dtype=np.float64)
    grad = knn_surrogate_gradient(model, x, np.asarray(y, dtype=np.int64),
                                  train_X, train_y)
    lo, hi = cfg.clip
    return np.clip(x + cfg.epsilon * np.sign(grad), lo, hi)


# ---------------------------------------------------------------------------
# batch front end
# ---------------------------------------------------------------------------

def generate(model, x, y, cfg) -> AdversarialBatch:
    """Run one attack over a batch and assemble the validated result."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    feasible = np.ones(len(x), dtype=bool)
    if cfg.method == "FGSM":
        adv = fgsm(model, x, y, cfg)
    elif cfg.method == "BIM":
        adv = bim(model, x, y, cfg)
    elif cfg.method == "MIM":
        adv = mim(model, x, y, cfg)
    elif cfg.method == "JSMA":
        adv = jsma(model, x, y, cfg)
    elif cfg.method == "CW":
        adv = cw_l2(model, x, y, cfg)
    elif cfg.method == "DT_REGION":
        adv, dist = dt_region(model, x, y, cfg)
        feasible = dist <= cfg.epsilon + BUDGET_SLACK
        adv = np.where(feasible[:, None], adv, x)
    elif cfg.method == "DT_PAPERNOT":
        adv, dist = dt_papernot(model, x, y, cfg)
        feasible = dist <= cfg.epsilon + BUDGET_SLACK
        adv = np.where(feasible[:, None], adv, x)
    elif cfg.method == "KNN_KSUB":
        adv = knn_ksub(model, x, y, cfg)
    else:
        raise ValueError(f"unknown attack method {cfg.method!r}")

    batch = AdversarialBatch(
        method=cfg.method, config=cfg, originals=x, perturbed=adv,
        true_labels=y, target_label=cfg.target_label,
        pred_before=model.predict_label(x), pred_after=model.predict_label(adv),
        feasible=feasible)
    return batch.validate()


# ---------------------------------------------------------------------------
# batch serialization (canonical CSV columns plus attack bookkeeping)
# ---------------------------------------------------------------------------

def save_batch(batch, prefix, dataset_id="SYNTH", subjects=None, positions=None,
               label_set=None):
    """Write `<prefix>.adv.csv` (perturbed rows + attack columns) and
    `<prefix>.orig.csv` (originals in the plain canonical/feature schema)."""
    import csv

    n, width = len(batch), batch.originals.reshape(len(batch), -1).shape[1]
    subjects = subjects if subjects is not None else np.zeros(n, dtype=int)
    positions = positions if positions is not None else np.full(n, "unspecified")
    value_prefix = "v" if width == 384 else "f"
    cols = [f"{value_prefix}{i}" for i in range(width)]
    names = (np.asarray(label_set)[batch.true_labels]
             if label_set is not None else batch.true_labels.astype(str))
    extra = ["method", "epsilon", "target_label",
             "source_pred_before", "source_pred_after"]

    with open(f"{prefix}.orig.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "subject", "position", "label"] + cols)
        flat = batch.originals.reshape(n, -1)
        for i in range(n):
            writer.writerow([dataset_id, int(subjects[i]), str(positions[i]),
                             names[i]] + [repr(float(v)) for v in flat[i]])

    with open(f"{prefix}.adv.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "subject", "position", "label"] + cols + extra)
        flat = batch.perturbed.reshape(n, -1)
        tgt = "" if batch.target_label is None else int(batch.target_label)
        for i in range(n):
            writer.writerow([dataset_id, int(subjects[i]), str(positions[i]),
                             names[i]] + [repr(float(v)) for v in flat[i]]
                            + [batch.method, repr(float(batch.config.epsilon)), tgt,
                               int(batch.pred_before[i]), int(batch.pred_after[i])])


def load_batch(prefix, cfg=None, label_set=None):
    """Rebuild an AdversarialBatch from the .orig/.adv CSV pair.

    With a label_set, true labels index into it (the files carry names);
    without one, indices follow the sorted distinct names in the file. The
    reconstructed batch additionally exposes the raw name column as
    `true_label_names`.
    """
    import csv

    def read(path, n_extra):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        n_values = len(header) - 4 - n_extra
        values = np.array([[float(v) for v in row[4 : 4 + n_values]] for row in rows])
        return header, rows, values

    _, orig_rows, originals = read(f"{prefix}.orig.csv", 0)
    _, adv_rows, perturbed = read(f"{prefix}.adv.csv", 5)
    method = adv_rows[0][-5]
    epsilon = float(adv_rows[0][-4])
    target = adv_rows[0][-3]
    target = None if target == "" else int(target)
    if originals.shape[1] == 384:
        originals = originals.reshape(-1, 128, 3)
        perturbed = perturbed.reshape(-1, 128, 3)
    if cfg is None:
        cfg = AttackConfig(method=method, epsilon=epsilon, target_label=target)
    labels = np.array([row[3] for row in orig_rows])
    names = list(label_set) if label_set is not None else sorted(set(labels.tolist()))
    index = {name: i for i, name in enumerate(names)}
    batch = AdversarialBatch(
        method=method, config=cfg, originals=originals, perturbed=perturbed,
        true_labels=np.array([index[l] for l in labels]),
        target_label=target,
        pred_before=np.array([int(row[-2]) for row in adv_rows]),
        pred_after=np.array([int(row[-1]) for row in adv_rows]))
    batch.true_label_names = labels
    return batch
