"""Shared fixtures: one synthetic dataset and its derived artifacts, built
once per session so the experiment-level tests stay fast."""

import numpy as np
import pytest

from advhar.dataio import synth_generate
from advhar.features import extract_dataset


@pytest.fixture(scope="session")
def synth_windows():
    return synth_generate(n_subjects=6, n_classes=6, windows_per_class=10, seed=42)


@pytest.fixture(scope="session")
def synth_raw_features(synth_windows):
    from advhar.dataio import apply_scaler, fit_scaler

    scaled = apply_scaler(fit_scaler(synth_windows), synth_windows)
    return extract_dataset(scaled)


@pytest.fixture(scope="session")
def subjects_report(synth_windows):
    """One shared across-subjects run (BIM over the epsilon grid)."""
    from advhar.harness import run_across_subjects

    return run_across_subjects(
        synth_windows, seed=7, methods=("BIM",),
        epsilons=(0.1, 0.25, 0.5, 0.9), targeted_modes=(False, True),
        iterations=10, cnn_epochs=10, max_samples=120)
