"""Statistical feature extraction for the classic (non-CNN) classifiers.

Each 128x3 window maps to a fixed 45-dimensional vector: 14 per-axis
statistics for x, y, z plus the three pairwise Pearson correlations. The
ordering below is the contract for the feature CSV and every trained
feature-space model.

Degenerate-input rules keep every vector finite: a zero-variance axis gets
skewness 0, excess kurtosis 0, and correlation 0 for any pair involving it.
Moments use population (n-denominator) normalization and kurtosis is
reported as excess kurtosis. Zero crossings count strict sign changes of the
raw signal, with exact zeros inheriting the previous sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AXES = ("x", "y", "z")
AXIS_STATS = ("mean", "std", "var", "min", "max", "range", "median", "rms",
              "mad", "iqr", "skewness", "kurtosis", "zero_crossings", "energy")
PAIRS = (("x", "y"), ("x", "z"), ("y", "z"))

# ordered (name, axis-or-pair, statistic) descriptors; extraction follows it
FEATURE_SPEC = tuple(
    [(f"{axis}_{stat}", axis, stat) for axis in AXES for stat in AXIS_STATS]
    + [(f"corr_{a}{b}", f"{a}{b}", "pearson") for a, b in PAIRS]
)
FEATURE_NAMES = [name for name, _, _ in FEATURE_SPEC]
N_FEATURES = len(FEATURE_SPEC)
assert N_FEATURES == 45


@dataclass
class FeatureDataset:
    """Feature rows plus the window metadata they came from."""

    values: np.ndarray     # (n, 45)
    labels: np.ndarray     # (n,) indices into label_set
    subjects: np.ndarray
    positions: np.ndarray
    label_set: list
    dataset_id: str = "SYNTH"
    split_name: str = "all"

    def __len__(self):
        return len(self.values)

    @property
    def n_classes(self):
        return len(self.label_set)

    def label_names(self):
        return np.array([self.label_set[i] for i in self.labels])

    def subset(self, idx, split_name=None):
        return FeatureDataset(self.values[idx], self.labels[idx],
                              self.subjects[idx], self.positions[idx],
                              list(self.label_set), self.dataset_id,
                              split_name or self.split_name)


def _zero_crossings(sig):
    signs = np.sign(sig)
    # zeros inherit the previous sign so a touch of the axis is not a crossing
    for i in range(1, len(signs)):
        if signs[i] == 0:
            signs[i] = signs[i - 1]
    return int(np.sum(signs[1:] * signs[:-1] < 0))


def _axis_features(sig):
    mean = sig.mean()
    constant = sig.max() == sig.min()
    centered = sig - mean if not constant else np.zeros_like(sig)
    var = float(np.mean(centered ** 2))
    std = np.sqrt(var)
    q75, q25 = np.percentile(sig, [75, 25])
    if std > 0:
        skew = float(np.mean(centered ** 3)) / std ** 3
        kurt = float(np.mean(centered ** 4)) / var ** 2 - 3.0
    else:
        skew = 0.0
        kurt = 0.0
    return [
        float(mean),
        float(std),
        var,
        float(sig.min()),
        float(sig.max()),
        float(sig.max() - sig.min()),
        float(np.median(sig)),
        float(np.sqrt(np.mean(sig ** 2))),
        float(np.mean(np.abs(centered))),
        float(q75 - q25),
        skew,
        kurt,
        float(_zero_crossings(sig)),
        float(np.mean(sig ** 2)),
    ]


def _pearson(a, b):
    if a.max() == a.min() or b.max() == b.min():
        return 0.0
    sa, sb = a.std(), b.std()
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return min(1.0, max(-1.0, r))


def extract_features(values):
    """Map one (128, 3) window to the ordered 45-vector."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != 3:
        raise ValueError(f"expected a (T, 3) window, got {values.shape}")
    out = []
    for axis in range(3):
        out.extend(_axis_features(values[:, axis]))
    out.append(_pearson(values[:, 0], values[:, 1]))
    out.append(_pearson(values[:, 0], values[:, 2]))
    out.append(_pearson(values[:, 1], values[:, 2]))
    vec = np.array(out)
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError("non-finite feature value")
    return vec


def extract_dataset(ds) -> FeatureDataset:
    feats = np.stack([extract_features(ds.values[i]) for i in range(len(ds))])
    return FeatureDataset(feats, ds.labels.copy(), ds.subjects.copy(),
                          ds.positions.copy(), list(ds.label_set),
                          ds.dataset_id, ds.split_name)


# ---------------------------------------------------------------------------
# feature scaling
# ---------------------------------------------------------------------------

@dataclass
class FeatureScalerParams:
    """Per-column min/max fitted on a training split.

    Constant columns (min == max) collapse to 0 instead of failing: some
    features (e.g. zero crossings on a one-class dataset) can legitimately be
    constant over a training split.
    """

    minimum: np.ndarray  # (45,)
    maximum: np.ndarray  # (45,)

    @property
    def constant(self):
        return self.minimum == self.maximum


def fit_feature_scaler(ds: FeatureDataset) -> FeatureScalerParams:
    return FeatureScalerParams(ds.values.min(axis=0), ds.values.max(axis=0))


def apply_feature_scaler(params: FeatureScalerParams, ds: FeatureDataset) -> FeatureDataset:
    span = np.where(params.constant, 1.0, params.maximum - params.minimum)
    scaled = 2.0 * (ds.values - params.minimum) / span - 1.0
    scaled[:, params.constant] = 0.0
    np.clip(scaled, -1.0, 1.0, out=scaled)
    return FeatureDataset(scaled, ds.labels, ds.subjects, ds.positions,
                          list(ds.label_set), ds.dataset_id, ds.split_name)


# ---------------------------------------------------------------------------
# feature CSV
# ---------------------------------------------------------------------------

FEATURE_HEADER = (["dataset", "subject", "position", "label"]
                  + [f"f{i}" for i in range(N_FEATURES)])


def write_feature_csv(ds: FeatureDataset, path):
    import csv

    names = ds.label_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_HEADER)
        for i in range(len(ds)):
            writer.writerow([ds.dataset_id, int(ds.subjects[i]),
                             str(ds.positions[i]), names[i]]
                            + [repr(float(v)) for v in ds.values[i]])


def read_feature_csv(path, label_set=None):
    import csv

    from advhar.dataio import DataError

    rows, labels, subjects, positions = [], [], [], []
    dataset_id = "SYNTH"
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FEATURE_HEADER:
            raise DataError(f"{path}: bad feature CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(FEATURE_HEADER):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(FEATURE_HEADER)} columns, got {len(row)}")
            dataset_id = row[0]
            subjects.append(int(row[1]))
            positions.append(row[2])
            labels.append(row[3])
            rows.append([float(v) for v in row[4:]])
    if label_set is None:
        label_set = sorted(set(labels))
    index = {name: i for i, name in enumerate(label_set)}
    return FeatureDataset(np.array(rows), np.array([index[l] for l in labels]),
                          np.array(subjects), np.array(positions),
                          list(label_set), dataset_id)
