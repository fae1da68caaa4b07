"""CART decision trees with geometry helpers.

Trees grow on Gini impurity until nodes are pure or hold fewer than two
samples (no depth limit). Splits send x[feature] <= threshold to the left
child. Growth is fully deterministic: features are scanned in index order
and thresholds ascending, with strictly-better gain required to displace the
current best, so ties resolve to the lowest feature index and threshold.

Every leaf's decision path defines an axis-aligned box; `leaf_boxes` exposes
those hyperrectangles (lower bounds from right-branches are open, upper
bounds are closed) so attacks can treat the tree as a region classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_GAIN = 1e-12


@dataclass
class TreeNode:
    counts: np.ndarray                  # class histogram of training samples here
    feature: int = -1                   # -1 marks a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    node_id: int = -1                   # preorder index, assigned by grow_tree

    @property
    def is_leaf(self):
        return self.feature < 0


def _gini(counts):
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float(np.sum(p * p))


def _best_split(X, y, n_classes, feature_ids):
    """Best (feature, threshold, gain) over the given features, or None."""
    n = len(y)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    parent = _gini(onehot.sum(axis=0))
    best = None
    for f in feature_ids:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        sv = col[order]
        cum = np.cumsum(onehot[order], axis=0)
        total = cum[-1]
        # candidate boundaries sit between distinct consecutive values
        cut = np.where(sv[1:] > sv[:-1])[0]
        if len(cut) == 0:
            continue
        left = cum[cut]
        right = total - left
        nl = left.sum(axis=1)
        nr = right.sum(axis=1)
        gini_l = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
        gini_r = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
        gains = parent - (nl * gini_l + nr * gini_r) / n
        j = int(np.argmax(gains))
        if gains[j] > MIN_GAIN and (best is None or gains[j] > best[2]):
            thr = 0.5 * (sv[cut[j]] + sv[cut[j] + 1])
            best = (f, float(thr), float(gains[j]))
    return best


def grow_tree(X, y, n_classes, rng=None, max_features=None):
    """Grow a CART tree; optionally subsample candidate features per node.

    When a feature subset yields no usable split at an impure node, the
    search falls back to all features before giving up and making a leaf.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d = X.shape[1]

    def build(idx):
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.int64)
        node = TreeNode(counts=counts)
        if len(idx) < 2 or np.count_nonzero(counts) <= 1:
            return node
        if max_features is not None and max_features < d:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
            split = _best_split(X[idx], y[idx], n_classes, feats)
            if split is None:
                split = _best_split(X[idx], y[idx], n_classes, range(d))
        else:
            split = _best_split(X[idx], y[idx], n_classes, range(d))
        if split is None:
            return node
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        node.feature = f
        node.threshold = thr
        node.left = build(idx[go_left])
        node.right = build(idx[~go_left])
        return node

    root = build(np.arange(len(y)))
    for i, node in enumerate(iter_preorder(root)):
        node.node_id = i
    return root


def iter_preorder(root):
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        if not node.is_leaf:
            stack.append(node.right)
            stack.append(node.left)


def route(root, x):
    node = root
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node


def predict_counts(root, X):
    """Leaf class histograms for a batch."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((len(X), len(root.counts)), dtype=np.float64)
    idx = np.arange(len(X))
    stack = [(root, idx)]
    while stack:
        node, members = stack.pop()
        if node.is_leaf:
            out[members] = node.counts
            continue
        go_left = X[members, node.feature] <= node.threshold
        stack.append((node.left, members[go_left]))
        stack.append((node.right, members[~go_left]))
    return out


@dataclass
class LeafBox:
    """Hyperrectangle of one leaf: lower < x <= upper coordinate-wise, with
    lower open only where it came from a right branch."""

    leaf: TreeNode
    lower: np.ndarray
    upper: np.ndarray
    lower_open: np.ndarray  # bool mask
    label: int = field(init=False)

    def __post_init__(self):
        self.label = int(np.argmax(self.leaf.counts))

    def contains(self, x):
        above = np.where(self.lower_open, x > self.lower, x >= self.lower)
        return bool(np.all(above) and np.all(x <= self.upper))


def leaf_boxes(root, lo=-1.0, hi=1.0, d=None):
    if d is None:
        d = _max_feature(root) + 1
    boxes = []

    def walk(node, lower, upper, lower_open):
        if node.is_leaf:
            boxes.append(LeafBox(node, lower.copy(), upper.copy(), lower_open.copy()))
            return
        f, thr = node.feature, node.threshold
        u = upper[f]
        upper[f] = min(u, thr)
        walk(node.left, lower, upper, lower_open)
        upper[f] = u
        l, o = lower[f], lower_open[f]
        if thr > l:
            lower[f], lower_open[f] = thr, True
        elif thr == l:
            lower_open[f] = True
        walk(node.right, lower, upper, lower_open)
        lower[f], lower_open[f] = l, o

    walk(root, np.full(d, lo), np.full(d, hi), np.zeros(d, dtype=bool))
    return boxes


def _max_feature(root):
    best = 0
    for node in iter_preorder(root):
        if not node.is_leaf:
            best = max(best, node.feature)
    return best


def leaf_path(root, leaf_id):
    """Root-to-leaf list of (node, went_left) decisions."""

    def walk(node, path):
        if node.node_id == leaf_id:
            return path
        if node.is_leaf:
            return None
        found = walk(node.left, path + [(node, True)])
        if found is not None:
            return found
        return walk(node.right, path + [(node, False)])

    return walk(root, [])


def tree_adjacency(root):
    """Undirected parent/child adjacency over node ids (for BFS distance)."""
    adj = {}
    for node in iter_preorder(root):
        adj.setdefault(node.node_id, [])
        if not node.is_leaf:
            for child in (node.left, node.right):
                adj[node.node_id].append(child.node_id)
                adj.setdefault(child.node_id, []).append(node.node_id)
    return adj


def nodes_by_id(root):
    return {node.node_id: node for node in iter_preorder(root)}


# --- serialization (flat preorder arrays) ----------------------------------

def tree_to_arrays(root):
    nodes = list(iter_preorder(root))
    index = {id(n): i for i, n in enumerate(nodes)}
    feature = np.array([n.feature for n in nodes], dtype=np.int64)
    threshold = np.array([n.threshold for n in nodes], dtype=np.float64)
    left = np.array([index[id(n.left)] if not n.is_leaf else -1 for n in nodes],
                    dtype=np.int64)
    right = np.array([index[id(n.right)] if not n.is_leaf else -1 for n in nodes],
                     dtype=np.int64)
    counts = np.stack([n.counts for n in nodes]).astype(np.int64)
    return {"feature": feature, "threshold": threshold, "left": left,
            "right": right, "counts": counts}


def tree_from_arrays(arrays):
    feature = arrays["feature"]
    nodes = [TreeNode(counts=arrays["counts"][i].copy(),
                      feature=int(feature[i]),
                      threshold=float(arrays["threshold"][i]))
             for i in range(len(feature))]
    for i, node in enumerate(nodes):
        if node.feature >= 0:
            node.left = nodes[arrays["left"][i]]
            node.right = nodes[arrays["right"][i]]
    root = nodes[0]
    for i, node in enumerate(iter_preorder(root)):
        node.node_id = i
    return root
