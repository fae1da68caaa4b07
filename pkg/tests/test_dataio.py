"""Data pipeline tests: windowing against a brute-force offset scan, scaling
against its algebraic inverse, seeded splits, and the synthetic generator."""

import numpy as np
import pytest

from advhar import dataio
from advhar.dataio import (
    DataError,
    RawRecording,
    apply_scaler,
    balance_classes,
    fit_scaler,
    import_dataset,
    invert_scaler,
    read_canonical_csv,
    read_canonical_dataset,
    sliding_windows,
    split_by_subject,
    stratified_split,
    synth_generate,
    window_recordings,
    windows_to_dataset,
    write_canonical_csv,
)


def make_recording(t, label="Walking", subject=1, position="waist", seed=0):
    rng = np.random.default_rng(seed)
    return RawRecording(subject_id=subject, body_position=position,
                        samples=rng.normal(size=(t, 3)),
                        label_stream=np.full(t, label, dtype=object),
                        dataset_id="SYNTH")


# ---------------------------------------------------------------------------
# sliding windows
# ---------------------------------------------------------------------------

def test_window_count_exact_length():
    assert len(sliding_windows(make_recording(128))) == 1


def test_window_count_256_gives_three_offsets():
    wins = sliding_windows(make_recording(256))
    assert len(wins) == 3


def test_short_recording_yields_nothing():
    assert sliding_windows(make_recording(100)) == []


def test_windows_match_bruteforce_offset_scan():
    rng = np.random.default_rng(42)
    t = 1000
    labels = np.array([f"class_{i}" for i in rng.integers(0, 3, t)], dtype=object)
    rec = RawRecording(1, "waist", rng.normal(size=(t, 3)), labels)
    got = sliding_windows(rec)

    # oracle: explicitly enumerate every stride-64 offset and majority-vote
    expected = []
    for start in range(0, t - 128 + 1, 64):
        span = labels[start : start + 128]
        best, best_count, tie = None, -1, False
        for name in sorted(set(span.tolist())):
            count = int((span == name).sum())
            if count > best_count:
                best, best_count, tie = name, count, False
            elif count == best_count:
                tie = True
        if not tie:
            expected.append((start, best))
    assert len(got) == len(expected)
    for win, (start, label) in zip(got, expected):
        assert win.label == label
        assert np.array_equal(win.values, rec.samples[start : start + 128])


def test_window_majority_label_and_tie_discard():
    labels = np.array(["A"] * 70 + ["B"] * 58, dtype=object)
    rec = RawRecording(1, "waist", np.zeros((128, 3)) + 0.5, labels)
    wins = sliding_windows(rec)
    assert len(wins) == 1 and wins[0].label == "A"

    tied = np.array(["A"] * 64 + ["B"] * 64, dtype=object)
    rec = RawRecording(1, "waist", np.zeros((128, 3)) + 0.5, tied)
    assert sliding_windows(rec) == []


def test_windows_never_mix_subjects_or_positions():
    recs = [make_recording(256, subject=1, position="chest"),
            make_recording(256, subject=2, position="left_ankle")]
    ds = window_recordings(recs)
    for i in range(len(ds)):
        w = ds.window(i)
        assert (w.subject_id, w.body_position) in {(1, "chest"), (2, "left_ankle")}


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def _dataset_from_values(values, labels=None):
    n = len(values)
    labels = labels if labels is not None else np.zeros(n, dtype=int)
    return dataio.WindowedDataset(values, labels, np.zeros(n, dtype=int),
                                  np.full(n, "waist"), ["class_0", "class_1"])


def test_scaler_maps_range_to_unit_interval():
    vals = np.zeros((1, 128, 3))
    vals[0, :, 0] = np.linspace(0, 10, 128)
    vals[0, 0, :] = [0.0, -1.0, -1.0]
    vals[0, 1, :] = [10.0, 1.0, 1.0]
    vals[0, 2, 0] = 5.0
    ds = _dataset_from_values(vals)
    scaled = apply_scaler(fit_scaler(ds), ds)
    assert scaled.values[0, 0, 0] == -1.0
    assert scaled.values[0, 1, 0] == 1.0
    assert abs(scaled.values[0, 2, 0]) < 1e-12


def test_scaler_identity_when_already_unit():
    rng = np.random.default_rng(0)
    vals = rng.uniform(-1, 1, (4, 128, 3))
    vals[0, 0, :] = -1.0
    vals[0, 1, :] = 1.0
    ds = _dataset_from_values(vals)
    scaled = apply_scaler(fit_scaler(ds), ds)
    assert np.max(np.abs(scaled.values - vals)) < 1e-12


def test_scaler_roundtrip_against_algebraic_inverse():
    rng = np.random.default_rng(1)
    vals = rng.uniform(-5, 17, (6, 128, 3))
    ds = _dataset_from_values(vals)
    params = fit_scaler(ds)
    scaled = apply_scaler(params, ds)
    back = invert_scaler(params, scaled.values)
    assert np.max(np.abs(back - vals)) < 1e-12


def test_scaler_training_split_lands_in_unit_box_and_clamps_others():
    rng = np.random.default_rng(2)
    train = _dataset_from_values(rng.uniform(0, 1, (5, 128, 3)))
    params = fit_scaler(train)
    assert np.all(np.abs(apply_scaler(params, train).values) <= 1.0)
    wild = _dataset_from_values(rng.uniform(-2, 3, (5, 128, 3)))
    clamped = apply_scaler(params, wild)
    assert clamped.values.max() == 1.0 and clamped.values.min() == -1.0


def test_scaler_constant_channel_errors():
    vals = np.zeros((2, 128, 3))
    vals[:, :, 0] = np.linspace(0, 1, 128)
    with pytest.raises(DataError):
        fit_scaler(_dataset_from_values(vals))


# ---------------------------------------------------------------------------
# splits and balancing
# ---------------------------------------------------------------------------

def _multi_subject_dataset(n_subjects, per_subject=2):
    values = np.zeros((n_subjects * per_subject, 128, 3))
    values[:, :, :] = np.linspace(-1, 1, 128)[None, :, None]
    labels = np.zeros(n_subjects * per_subject, dtype=int)
    subjects = np.repeat(np.arange(n_subjects), per_subject)
    return dataio.WindowedDataset(values, labels, subjects,
                                  np.full(len(labels), "waist"), ["class_0"])


@pytest.mark.parametrize("n,expected", [(30, (15, 15)), (10, (5, 5)), (7, (3, 4))])
def test_subject_split_cardinalities(n, expected):
    split, src, tgt = split_by_subject(_multi_subject_dataset(n), seed=3)
    assert (len(split.source_subjects), len(split.target_subjects)) == expected
    assert split.source_subjects.isdisjoint(split.target_subjects)
    assert split.source_subjects | split.target_subjects == set(range(n))
    assert set(src.subjects) == split.source_subjects
    assert set(tgt.subjects) == split.target_subjects


def test_subject_split_deterministic():
    ds = _multi_subject_dataset(9)
    a = split_by_subject(ds, seed=7)[0]
    b = split_by_subject(ds, seed=7)[0]
    assert a.source_subjects == b.source_subjects


def test_subject_split_single_subject_errors():
    with pytest.raises(DataError):
        split_by_subject(_multi_subject_dataset(1))


def test_balance_classes_counts():
    values = np.zeros((20, 128, 3))
    labels = np.array([0] * 10 + [1] * 4 + [2] * 6)
    ds = dataio.WindowedDataset(values, labels, np.zeros(20, dtype=int),
                                np.full(20, "waist"), ["a", "b", "c"])
    bal = balance_classes(ds, seed=0)
    hist = np.bincount(bal.labels, minlength=3)
    assert hist.tolist() == [4, 4, 4] and len(bal) == 12


def test_balance_already_balanced_keeps_label_multiset():
    values = np.zeros((6, 128, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    ds = dataio.WindowedDataset(values, labels, np.zeros(6, dtype=int),
                                np.full(6, "waist"), ["a", "b", "c"])
    bal = balance_classes(ds, seed=5)
    assert sorted(bal.labels.tolist()) == sorted(labels.tolist())


def test_stratified_split_fractions():
    ds = synth_generate(2, 3, 10, seed=0)
    train, test = stratified_split(ds, test_fraction=0.3, seed=1)
    assert len(train) + len(test) == len(ds)
    for c in range(3):
        assert (test.labels == c).sum() == round(0.3 * (ds.labels == c).sum())


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synth_deterministic_bit_identical():
    a = synth_generate(3, 4, 5, seed=11)
    b = synth_generate(3, 4, 5, seed=11)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.subjects, b.subjects)


def test_synth_shapes_and_metadata():
    ds = synth_generate(3, 4, 5, seed=1)
    assert len(ds) == 3 * 4 * 5
    assert ds.values.shape == (60, 128, 3)
    assert set(ds.subjects.tolist()) == {0, 1, 2}
    assert ds.label_set == [f"class_{c}" for c in range(4)]


def test_synth_single_class_is_trivially_classified():
    from advhar.features import extract_dataset
    from advhar.models import train_knn

    ds = synth_generate(2, 1, 5, seed=2)
    scaled = apply_scaler(fit_scaler(ds), ds)
    feats = extract_dataset(scaled)
    model = train_knn(feats, k=1)
    assert model.evaluate(feats.values, feats.labels) == 1.0


# ---------------------------------------------------------------------------
# canonical CSV
# ---------------------------------------------------------------------------

def test_canonical_csv_roundtrip_bit_exact(tmp_path):
    ds = synth_generate(2, 2, 3, seed=4)
    path = tmp_path / "windows.csv"
    write_canonical_csv(ds, path)
    back = read_canonical_dataset(path, label_set=ds.label_set)
    assert np.array_equal(back.values, ds.values)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.subjects, ds.subjects)
    assert list(back.positions) == list(ds.positions)


def test_canonical_csv_two_rows_roundtrip_metadata(tmp_path):
    ds = synth_generate(2, 1, 1, seed=5)
    path = tmp_path / "two.csv"
    write_canonical_csv(ds, path)
    recs = import_dataset(str(path), "canonical_csv")
    assert len(recs) == 2
    assert [r.subject_id for r in recs] == [0, 1]
    assert all(r.body_position == "unspecified" for r in recs)
    assert all(r.label_stream[0] == "class_0" for r in recs)


def test_canonical_csv_rejects_wrong_column_count(tmp_path):
    ds = synth_generate(1, 1, 1, seed=6)
    path = tmp_path / "bad.csv"
    write_canonical_csv(ds, path)
    lines = path.read_text().splitlines()
    lines[1] = ",".join(lines[1].split(",")[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError) as exc:
        read_canonical_csv(path)
    assert ":2:" in str(exc.value)  # reports the offending line number


def test_import_missing_path_errors():
    with pytest.raises(DataError):
        import_dataset("/nonexistent/nowhere", "uci")


def test_import_unknown_layout():
    with pytest.raises(ValueError):
        import_dataset(".", "bogus")


# ---------------------------------------------------------------------------
# archive importers on miniature fixture archives
# ---------------------------------------------------------------------------

def _write_uci_fixture(root, n_train=4, n_test=2):
    rng = np.random.default_rng(0)
    base = root / "UCI HAR Dataset"
    for part, n in (("train", n_train), ("test", n_test)):
        sig = base / part / "Inertial Signals"
        sig.mkdir(parents=True)
        for a in ("x", "y", "z"):
            mat = rng.normal(size=(n, 128))
            np.savetxt(sig / f"total_acc_{a}_{part}.txt", mat)
        np.savetxt(base / part / f"subject_{part}.txt",
                   rng.integers(1, 4, size=(n, 1)), fmt="%d")
        np.savetxt(base / part / f"y_{part}.txt",
                   rng.integers(1, 7, size=(n, 1)), fmt="%d")
    return base


def test_uci_importer_reads_prewindowed_rows(tmp_path):
    _write_uci_fixture(tmp_path)
    recs = import_dataset(str(tmp_path), "uci")
    assert len(recs) == 6
    assert all(r.samples.shape == (128, 3) for r in recs)
    assert all(r.body_position == "waist" for r in recs)
    ds = window_recordings(recs)
    assert len(ds) == 6  # re-windowing the 128-row recordings is a no-op


def test_mhealth_importer_drops_null_and_jump_rows(tmp_path):
    rng = np.random.default_rng(1)
    rows = 400
    mat = rng.normal(size=(rows, 24))
    labels = np.zeros(rows, dtype=int)
    labels[:150] = 4    # Walking
    labels[150:300] = 12  # dropped jump class
    labels[300:350] = 0   # null class
    labels[350:] = 2    # Sitting and relaxing
    mat[:, 23] = labels
    np.savetxt(tmp_path / "mHealth_subject1.log", mat, delimiter="\t")
    recs = import_dataset(str(tmp_path), "mhealth")
    assert len(recs) == 3  # one per body position
    assert {r.body_position for r in recs} == {"chest", "left_ankle", "right_wrist"}
    for r in recs:
        assert len(r.samples) == 200  # 150 walking + 50 sitting
        assert set(r.label_stream.tolist()) == {"Walking", "Sitting and relaxing"}


def test_dl_importer_per_subject_csv(tmp_path):
    for k in (1, 2):
        lines = ["timestamp,x,y,z,activity"]
        for i in range(150):
            lines.append(f"{i},0.1,0.2,0.3,Walking")
        (tmp_path / f"subject_{k}.csv").write_text("\n".join(lines) + "\n")
    recs = import_dataset(str(tmp_path), "dl")
    assert [r.subject_id for r in recs] == [1, 2]
    assert all(len(r.samples) == 150 for r in recs)


def test_dl_importer_reports_bad_row(tmp_path):
    (tmp_path / "subject_1.csv").write_text(
        "timestamp,x,y,z,activity\n0,0.1,oops,0.3,Walking\n")
    with pytest.raises(DataError) as exc:
        import_dataset(str(tmp_path), "dl")
    assert ":2:" in str(exc.value)


def test_windows_to_dataset_rejects_unknown_label():
    ds = synth_generate(1, 2, 1, seed=0)
    wins = [ds.window(i) for i in range(len(ds))]
    with pytest.raises(DataError):
        windows_to_dataset(wins, label_set=["class_0"])
