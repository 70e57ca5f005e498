import numpy as np
import pytest

from hoikit.synth_bench import SynthConfig, generate_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sequence():
    """Six-frame clean carry sequence shared by several modules' tests."""
    return generate_sequence(SynthConfig(n_frames=6, outlier_rate=0.0, seed=3))
