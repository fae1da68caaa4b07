"""Dataset ingestion, windowing, scaling, splits, and a synthetic generator.

Three raw archive layouts (UCI smartphone, MHEALTH body-sensor logs, a
per-subject daily-log CSV layout) are adapted onto one canonical in-memory
form: 128-step, 3-channel accelerometer windows with subject / position /
label metadata. A canonical CSV format (one window per row) decouples the
experiment tooling from the archives so everything downstream also runs on
synthetic data.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

WINDOW_LEN = 128
N_CHANNELS = 3

POSITIONS = ("chest", "right_wrist", "left_ankle", "waist", "unspecified")
DATASET_IDS = ("UCI", "MHEALTH", "DL", "SYNTH")

UCI_LABELS = ["Walking", "Walking Upstairs", "Walking Downstairs",
              "Sitting", "Standing", "Laying"]
MHEALTH_LABELS = ["Standing still", "Sitting and relaxing", "Lying down",
                  "Walking", "Climbing stairs", "Waist bends forward",
                  "Frontal elevation of arms", "Knees bending", "Cycling",
                  "Jogging", "Running"]
MHEALTH_DROPPED_LABEL = 12  # "Jump Front & Back", removed for class balance


class DataError(ValueError):
    """Raised on malformed archives, rows, or inconsistent metadata."""


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class RawRecording:
    """A contiguous 3-axial accelerometer stream with per-sample labels."""

    subject_id: int
    body_position: str
    samples: np.ndarray       # (T, 3)
    label_stream: np.ndarray  # (T,) of label names (str)
    sample_rate_hz: float = 50.0
    dataset_id: str = "SYNTH"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.label_stream = np.asarray(self.label_stream)
        if self.sample_rate_hz != 50.0:
            raise DataError(f"sample rate must be 50 Hz, got {self.sample_rate_hz}")
        if self.body_position not in POSITIONS:
            raise DataError(f"unknown body position {self.body_position!r}")
        if self.samples.ndim != 2 or self.samples.shape[1] != N_CHANNELS:
            raise DataError(f"samples must be (T, 3), got {self.samples.shape}")
        if len(self.samples) == 0:
            raise DataError("empty recording")
        if len(self.label_stream) != len(self.samples):
            raise DataError("label stream length does not match samples")


@dataclass
class Window:
    """One 128x3 segment; the unit every attack perturbs."""

    values: np.ndarray  # (128, 3)
    label: str
    subject_id: int
    body_position: str
    dataset_id: str


@dataclass
class WindowedDataset:
    """Column-oriented window collection.

    labels are dense indices into label_set; per-window metadata rides in
    parallel arrays so models and attacks can work on plain ndarrays.
    """

    values: np.ndarray     # (n, 128, 3)
    labels: np.ndarray     # (n,) int indices into label_set
    subjects: np.ndarray   # (n,) int
    positions: np.ndarray  # (n,) str
    label_set: list        # ordered label names
    dataset_id: str = "SYNTH"
    split_name: str = "all"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.positions = np.asarray(self.positions)
        if self.values.ndim != 3 or self.values.shape[1:] != (WINDOW_LEN, N_CHANNELS):
            raise DataError(f"values must be (n, 128, 3), got {self.values.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_set)):
            raise DataError("label index outside label_set")

    def __len__(self):
        return len(self.values)

    @property
    def n_classes(self):
        return len(self.label_set)

    def label_names(self):
        return np.array([self.label_set[i] for i in self.labels])

    def window(self, i):
        return Window(self.values[i], self.label_set[self.labels[i]],
                      int(self.subjects[i]), str(self.positions[i]), self.dataset_id)

    def subset(self, idx, split_name=None):
        return WindowedDataset(self.values[idx], self.labels[idx],
                               self.subjects[idx], self.positions[idx],
                               list(self.label_set), self.dataset_id,
                               split_name or self.split_name)


@dataclass
class ScalerParams:
    """Per-channel min/max fitted on a training split."""

    minimum: np.ndarray  # (3,)
    maximum: np.ndarray  # (3,)

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if np.any(self.minimum >= self.maximum):
            raise DataError("scaler needs min < max on every channel")


@dataclass
class SubjectSplit:
    source_subjects: set
    target_subjects: set
    seed: int


@dataclass
class LabelMap:
    """Injective source-label -> target-label mapping for shared activities."""

    pairs: dict

    def __post_init__(self):
        values = list(self.pairs.values())
        if len(set(values)) != len(values):
            raise DataError("label map must be injective")

    def map(self, name):
        return self.pairs[name]

    def covers(self, name):
        return name in self.pairs


# Activities common to all three datasets (walking, sitting, standing,
# climbing stairs), expressed per dataset vocabulary.
SHARED_ACTIVITIES = {
    "UCI": ["Walking", "Sitting", "Standing", "Walking Upstairs"],
    "MHEALTH": ["Walking", "Sitting and relaxing", "Standing still", "Climbing stairs"],
    "DL": ["Walking", "Sitting", "Standing", "Climbing stairs"],
}


def default_label_map(source_id, target_id):
    src = SHARED_ACTIVITIES[source_id]
    dst = SHARED_ACTIVITIES[target_id]
    return LabelMap(dict(zip(src, dst)))


# ---------------------------------------------------------------------------
# windowing and scaling
# ---------------------------------------------------------------------------

def sliding_windows(rec: RawRecording, length=WINDOW_LEN, overlap=0.5):
    """Fixed-length windows with fractional overlap.

    Window label is the majority per-sample label over the span; ties drop
    the window. Recordings shorter than one window yield an empty list.
    """
    if length < 1 or not 0 <= overlap < 1:
        raise ValueError(f"bad windowing parameters length={length} overlap={overlap}")
    stride = int(round(length * (1 - overlap)))
    out = []
    t = len(rec.samples)
    if t < length:
        return out
    for start in range(0, t - length + 1, stride):
        span = rec.label_stream[start : start + length]
        names, counts = np.unique(span, return_counts=True)
        top = counts.max()
        if (counts == top).sum() > 1:
            continue  # ambiguous window
        out.append(Window(rec.samples[start : start + length].copy(),
                          str(names[np.argmax(counts)]), rec.subject_id,
                          rec.body_position, rec.dataset_id))
    return out


def windows_to_dataset(windows, label_set=None, dataset_id=None, split_name="all"):
    if not windows:
        raise DataError("no windows to assemble")
    if label_set is None:
        label_set = sorted({w.label for w in windows})
    index = {name: i for i, name in enumerate(label_set)}
    missing = {w.label for w in windows} - set(index)
    if missing:
        raise DataError(f"window labels {sorted(missing)} not in label set {label_set}")
    return WindowedDataset(
        values=np.stack([w.values for w in windows]),
        labels=np.array([index[w.label] for w in windows]),
        subjects=np.array([w.subject_id for w in windows]),
        positions=np.array([w.body_position for w in windows]),
        label_set=list(label_set),
        dataset_id=dataset_id or windows[0].dataset_id,
        split_name=split_name,
    )


def window_recordings(recordings, label_set=None, split_name="all"):
    windows = []
    for rec in recordings:
        windows.extend(sliding_windows(rec))
    return windows_to_dataset(windows, label_set=label_set,
                              dataset_id=recordings[0].dataset_id,
                              split_name=split_name)


def fit_scaler(train: WindowedDataset) -> ScalerParams:
    lo = train.values.min(axis=(0, 1))
    hi = train.values.max(axis=(0, 1))
    if np.any(lo == hi):
        flat = np.where(lo == hi)[0]
        raise DataError(f"constant channel(s) {flat.tolist()}: cannot fit scaler")
    return ScalerParams(lo, hi)


def apply_scaler(params: ScalerParams, ds: WindowedDataset) -> WindowedDataset:
    """Map per channel into [-1, 1]; out-of-range values clamp."""
    scaled = 2.0 * (ds.values - params.minimum) / (params.maximum - params.minimum) - 1.0
    np.clip(scaled, -1.0, 1.0, out=scaled)
    return WindowedDataset(scaled, ds.labels, ds.subjects, ds.positions,
                           list(ds.label_set), ds.dataset_id, ds.split_name)


def invert_scaler(params: ScalerParams, values):
    return (np.asarray(values) + 1.0) / 2.0 * (params.maximum - params.minimum) + params.minimum


# ---------------------------------------------------------------------------
# splits and balancing
# ---------------------------------------------------------------------------

def split_by_subject(ds: WindowedDataset, fraction=0.5, seed=0):
    """Disjoint subject partition; the odd subject goes to the target side."""
    subjects = sorted(set(ds.subjects.tolist()))
    if len(subjects) < 2:
        raise DataError("need at least two subjects to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    n_source = int(np.floor(len(subjects) * fraction))
    source = {subjects[i] for i in order[:n_source]}
    target = {subjects[i] for i in order[n_source:]}
    split = SubjectSplit(source, target, seed)
    src_mask = np.isin(ds.subjects, sorted(source))
    return (split,
            ds.subset(src_mask, split_name="source"),
            ds.subset(~src_mask, split_name="target"))


def balance_classes(ds: WindowedDataset, seed=0) -> WindowedDataset:
    """Subsample every class down to the rarest class's count."""
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    if np.any(counts == 0):
        raise DataError("every class must be nonempty to balance")
    rng = np.random.default_rng(seed)
    keep = []
    floor = counts.min()
    for c in range(ds.n_classes):
        idx = np.where(ds.labels == c)[0]
        keep.extend(rng.choice(idx, size=floor, replace=False).tolist())
    keep = np.sort(np.array(keep))
    return ds.subset(keep)


def stratified_split(ds: WindowedDataset, test_fraction=0.3, seed=0):
    """Per-class shuffled train/test split (default 70/30)."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.n_classes):
        idx = np.where(ds.labels == c)[0]
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * test_fraction))
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return (ds.subset(np.sort(np.array(train_idx)), split_name="train"),
            ds.subset(np.sort(np.array(test_idx)), split_name="test"))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def synth_generate(n_subjects=6, n_classes=6, windows_per_class=20, seed=0,
                   noise_sigma=0.05):
    """Band-limited synthetic accelerometer windows.

    Each class has a frequency/amplitude archetype (0.5-8 Hz range); each
    subject adds a fixed phase and gain offset; each window adds phase jitter
    plus Gaussian noise. windows_per_class counts windows per class *per
    subject*. Classes are separable enough for a small dense network to
    exceed 90% test accuracy at the default sizes.
    """
    if min(n_subjects, n_classes, windows_per_class) < 1:
        raise ValueError("all synthetic generator counts must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(WINDOW_LEN) / 50.0
    freqs = 0.6 + 7.0 * np.arange(n_classes) / max(1, n_classes - 1)
    tiers = 0.6 + 0.25 * (np.arange(n_classes) % 4)
    axis_scale = np.array([1.0, 0.8, 1.2])
    axis_phase = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    subj_phase = rng.uniform(0, 2 * np.pi, n_subjects)
    subj_gain = rng.uniform(0.8, 1.2, n_subjects)

    n = n_subjects * n_classes * windows_per_class
    values = np.empty((n, WINDOW_LEN, N_CHANNELS))
    labels = np.empty(n, dtype=np.int64)
    subjects = np.empty(n, dtype=np.int64)
    i = 0
    for s in range(n_subjects):
        for c in range(n_classes):
            for _ in range(windows_per_class):
                jitter = rng.uniform(0, 2 * np.pi)
                phase = subj_phase[s] + jitter + axis_phase[None, :]
                sig = (subj_gain[s] * tiers[c] * axis_scale[None, :]
                       * np.sin(2 * np.pi * freqs[c] * t[:, None] + phase))
                sig += rng.normal(0, noise_sigma, sig.shape)
                values[i] = sig
                labels[i] = c
                subjects[i] = s
                i += 1
    label_set = [f"class_{c}" for c in range(n_classes)]
    return WindowedDataset(values, labels, subjects,
                           np.full(n, "unspecified"), label_set, "SYNTH")


# ---------------------------------------------------------------------------
# canonical CSV (one window per row, channel-interleaved, time-major)
# ---------------------------------------------------------------------------

CANONICAL_HEADER = (["dataset", "subject", "position", "label"]
                    + [f"v{i}" for i in range(WINDOW_LEN * N_CHANNELS)])


def write_canonical_csv(ds: WindowedDataset, path):
    names = ds.label_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANONICAL_HEADER)
        for i in range(len(ds)):
            flat = ds.values[i].reshape(-1)  # row-major (time, channel) == v[3t+c]
            writer.writerow([ds.dataset_id, int(ds.subjects[i]),
                             str(ds.positions[i]), names[i]]
                            + [repr(float(v)) for v in flat])


def read_canonical_csv(path):
    """Each row becomes a 128-sample recording with a constant label stream."""
    recordings = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CANONICAL_HEADER:
            raise DataError(f"{path}: bad canonical CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CANONICAL_HEADER):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(CANONICAL_HEADER)} columns, got {len(row)}")
            dataset_id, subject, position, label = row[:4]
            try:
                flat = np.array([float(v) for v in row[4:]])
                subject = int(subject)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed value ({exc})") from None
            recordings.append(RawRecording(
                subject_id=subject, body_position=position,
                samples=flat.reshape(WINDOW_LEN, N_CHANNELS),
                label_stream=np.full(WINDOW_LEN, label, dtype=object),
                dataset_id=dataset_id))
    return recordings


def read_canonical_dataset(path, label_set=None, split_name="all"):
    return window_recordings(read_canonical_csv(path), label_set=label_set,
                             split_name=split_name)


# ---------------------------------------------------------------------------
# archive importers
# ---------------------------------------------------------------------------

def import_dataset(path, layout):
    """Adapt a raw archive (or canonical CSV) into RawRecordings."""
    importers = {"uci": _import_uci, "mhealth": _import_mhealth,
                 "dl": _import_dl, "canonical_csv": read_canonical_csv}
    if layout not in importers:
        raise ValueError(f"unknown layout {layout!r}; expected one of {sorted(importers)}")
    if not os.path.exists(path):
        raise DataError(f"dataset path does not exist: {path}")
    return importers[layout](path)


def _read_matrix(path, expected_cols=None):
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if expected_cols is not None and len(parts) != expected_cols:
                raise DataError(f"{path}:{lineno}: expected {expected_cols} "
                                f"columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed numeric row") from None
    return np.array(rows)


def _import_uci(path):
    """UCI smartphone archive: pre-windowed 128-sample inertial signal rows.

    Reads the total-acceleration channels of both the train and test halves;
    each row becomes one recording (window), so re-windowing is a no-op and
    the archive's 10299 rows survive verbatim.
    """
    root = path
    if os.path.isdir(os.path.join(path, "UCI HAR Dataset")):
        root = os.path.join(path, "UCI HAR Dataset")
    recordings = []
    for part in ("train", "test"):
        sig_dir = os.path.join(root, part, "Inertial Signals")
        axes = [_read_matrix(os.path.join(sig_dir, f"total_acc_{a}_{part}.txt"),
                             expected_cols=WINDOW_LEN) for a in ("x", "y", "z")]
        subjects = _read_matrix(os.path.join(root, part, f"subject_{part}.txt"),
                                expected_cols=1)[:, 0].astype(int)
        ys = _read_matrix(os.path.join(root, part, f"y_{part}.txt"),
                          expected_cols=1)[:, 0].astype(int)
        if not (len(axes[0]) == len(subjects) == len(ys)):
            raise DataError(f"{part}: inconsistent row counts in UCI archive")
        for i in range(len(ys)):
            samples = np.stack([axes[0][i], axes[1][i], axes[2][i]], axis=1)
            label = UCI_LABELS[ys[i] - 1]
            recordings.append(RawRecording(
                subject_id=int(subjects[i]), body_position="waist",
                samples=samples,
                label_stream=np.full(WINDOW_LEN, label, dtype=object),
                dataset_id="UCI"))
    return recordings


MHEALTH_ACC_COLUMNS = {"chest": (0, 1, 2), "left_ankle": (5, 6, 7),
                       "right_wrist": (14, 15, 16)}


def _import_mhealth(path):
    """MHEALTH logs: one recording per (subject, body position).

    Null-class rows (label 0) and the dropped jump class are removed before
    concatenation, matching how the per-dataset sample counts were derived.
    """
    recordings = []
    found = False
    for subject in range(1, 11):
        fname = os.path.join(path, f"mHealth_subject{subject}.log")
        if not os.path.exists(fname):
            continue
        found = True
        mat = _read_matrix(fname, expected_cols=24)
        labels = mat[:, 23].astype(int)
        keep = (labels != 0) & (labels != MHEALTH_DROPPED_LABEL)
        if not np.any(keep):
            raise DataError(f"{fname}: no labeled rows after class removal")
        names = np.array([MHEALTH_LABELS[l - 1] for l in labels[keep]], dtype=object)
        for position, cols in MHEALTH_ACC_COLUMNS.items():
            samples = mat[np.ix_(keep, list(cols))]
            recordings.append(RawRecording(
                subject_id=subject, body_position=position,
                samples=samples, label_stream=names.copy(),
                dataset_id="MHEALTH"))
    if not found:
        raise DataError(f"no mHealth_subject*.log files under {path}")
    return recordings


def _import_dl(path):
    """Daily-log layout: one subject_<k>.csv per subject.

    Expected header: timestamp,x,y,z,activity with 50 Hz acceleration rows in
    time order. (The interchange format for already-windowed data is the
    canonical CSV; this importer covers raw per-subject exports.)
    """
    recordings = []
    names = sorted(n for n in os.listdir(path)
                   if n.startswith("subject_") and n.endswith(".csv"))
    if not names:
        raise DataError(f"no subject_<k>.csv files under {path}")
    for name in names:
        subject = int(name[len("subject_"):-len(".csv")])
        fname = os.path.join(path, name)
        samples, labels = [], []
        with open(fname, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["timestamp", "x", "y", "z", "activity"]:
                raise DataError(f"{fname}: bad header {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 5:
                    raise DataError(f"{fname}:{lineno}: expected 5 columns, got {len(row)}")
                try:
                    samples.append([float(row[1]), float(row[2]), float(row[3])])
                except ValueError:
                    raise DataError(f"{fname}:{lineno}: malformed numeric row") from None
                labels.append(row[4])
        recordings.append(RawRecording(
            subject_id=subject, body_position="unspecified",
            samples=np.array(samples),
            label_stream=np.array(labels, dtype=object),
            dataset_id="DL"))
    return recordings
