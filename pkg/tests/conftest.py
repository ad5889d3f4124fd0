import numpy as np
import pytest

from cortexdec.runtime import tune_allocator
from cortexdec.signal import TrialSet

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_trialset(n_trials=26, n_channels=4, n_samples=32, n_subjects=2, seed=0,
                  sample_rate=250.0) -> TrialSet:
    r = np.random.default_rng(seed)
    return TrialSet(
        data=r.normal(size=(n_trials, n_channels, n_samples)).astype(np.float32),
        labels=np.arange(n_trials) % 13,
        subject_ids=np.arange(n_trials) % n_subjects,
        channel_names=tuple(f"CH{i:02d}" for i in range(n_channels)),
        sample_rate_hz=sample_rate,
    )


@pytest.fixture
def trialset():
    return make_trialset()
