"""
Error Hierarchy

Every failure the pipeline raises on purpose derives from TwoStageError
and carries the CLI exit code it maps to.
"""

from typing import Any, Dict, List, Optional


class TwoStageError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class ConfigError(TwoStageError):
    """Invalid experiment configuration or missing databases"""

    exit_code = 2


class DataError(TwoStageError):
    """Problem with input data (audio, manifests, features, targets)"""

    exit_code = 3


class AudioFormatError(DataError):
    """Malformed RIFF/WAVE file"""


class UnsupportedCodecError(DataError):
    """WAV encoding other than PCM 16-bit or 32-bit float"""


class AudioIOError(DataError):
    """Audio file could not be written"""


class DomainError(DataError, ValueError):
    """Operation called outside its domain (empty signal, rate mismatch, ...)"""


class DegenerateInputError(DomainError):
    """Zero-power speech or noise passed to SNR mixing"""


class NumericError(DataError, ArithmeticError):
    """NaN or infinity produced inside the network"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class TransferError(ConfigError):
    """Source checkpoint does not match the target architecture"""

    def __init__(self, message: str, mismatches: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.mismatches = mismatches or []


class TrainingDivergedError(DataError):
    """Loss became NaN during training; keeps the last good checkpoint"""

    def __init__(self, message: str, last_good: Any = None, step: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
