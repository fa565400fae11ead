"""Shared fixtures; the default dataset is expensive so build it once."""

import pytest

from skillfuse.cli import materialize_config, preprocess_trial
from skillfuse.synth import SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def default_dataset():
    """Preprocessed 8-subject x 10-trial dataset at separation 3, seed 0."""
    config = SynthConfig(n_subjects=8, trials_per_subject=10,
                         separation=3.0, rng_seed=0)
    trials, manifest = generate_dataset(config)
    prep = materialize_config({})["preprocess"]
    return [preprocess_trial(t, prep) for t in trials], manifest
