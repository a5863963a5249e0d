"""
Two-Staged Acoustic Modeling Core

Multi-condition source training followed by full-weight transfer to a
small target domain, evaluated leave-one-speaker-out.
"""

from .config import ExperimentConfig, load_config
from .engine import ExperimentEngine, run_loso
from .errors import ConfigError, DataError, TwoStageError
from .state import EventStore, ExperimentJournal, ExperimentState

__version__ = "1.0.0"
__all__ = [
    "ExperimentConfig", "load_config", "ExperimentEngine", "run_loso",
    "ConfigError", "DataError", "TwoStageError",
    "EventStore", "ExperimentJournal", "ExperimentState",
]
