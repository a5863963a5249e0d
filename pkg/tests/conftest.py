"""
Pytest configuration and shared fixtures
"""
import pytest
import tempfile
import shutil
from pathlib import Path
import sys

import numpy as np

# Repository root on the path so `core` imports as a package
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.audio import AudioSignal, write_wav
from core.config import FeatureConfig, ModelConfig, lstmp, tdnn
from core.corpus import synth_corpus


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Run slow end-to-end experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def temp_dir():
    """Temporary working directory, removed after the test"""
    path = Path(tempfile.mkdtemp())
    yield path
    shutil.rmtree(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_features():
    """Narrow front end: 13 cepstra, +-1 splice, 30-dim embedding (69 inputs)"""
    return FeatureConfig(num_mel_bins=13, num_ceps=13, splice_left=1, splice_right=1, embedding_dim=30)


@pytest.fixture
def tiny_model():
    """TDNN -> LSTMP -> TDNN stack small enough for exhaustive gradient checks"""
    return ModelConfig(
        input_dim=6,
        layers=[tdnn([-1, 0, 1], out_dim=5), lstmp(cell_dim=4, proj_dim=3), tdnn([-2, 0, 2], out_dim=4)],
        num_outputs=3,
        scale_factor=1.0,
    )


@pytest.fixture
def small_model():
    """Model sized for the narrow front end"""
    return ModelConfig(
        input_dim=69,
        layers=[tdnn([-1, 0, 1], out_dim=16), lstmp(cell_dim=8, proj_dim=6), tdnn([0], out_dim=12)],
        num_outputs=5,
        scale_factor=1.0,
    )


@pytest.fixture
def write_tone():
    """Write a sine tone WAV and return its path"""

    def _write(path: Path, seconds: float = 0.25, freq: float = 440.0, rate: int = 16000,
               amplitude: float = 0.5) -> Path:
        t = np.arange(int(seconds * rate)) / rate
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(AudioSignal(amplitude * np.sin(2 * np.pi * freq * t), rate), path)
        return path

    return _write


@pytest.fixture
def synthetic_corpus(temp_dir):
    """Three speakers, two utterances each, five phone classes"""
    return synth_corpus(temp_dir / "corpus", num_speakers=3, utts_per_speaker=2, phone_classes=5, seed=7)
