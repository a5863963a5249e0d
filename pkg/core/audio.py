"""
Audio Core

Sample container, WAV file I/O, windowed-sinc resampling and power
utilities shared by every DSP operation in the pipeline.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import soundfile as sf

from .errors import AudioFormatError, AudioIOError, DomainError, UnsupportedCodecError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

CORPUS_RATE_HZ = 16000
RESAMPLE_HALF_WIDTH = 32
KAISER_BETA = 8.6
PCM16_SCALE = 32768.0

SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")


@dataclass
class AudioSignal:
    """Mono 64-bit float samples plus their sample rate"""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise DomainError(f"Sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def require_valid(self, what: str = "signal") -> "AudioSignal":
        """Check the DSP pre-condition: non-empty and finite"""
        if len(self) == 0:
            raise DomainError(f"{what} is empty")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError(f"{what} contains non-finite samples")
        return self


@dataclass
class WriteResult:
    """Outcome of write_wav"""

    path: Path
    frames: int
    clip_count: int


def read_wav(path: Union[str, Path]) -> AudioSignal:
    """Read a PCM16 or float32 WAV file, keeping channel 0 only"""
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, sf.SoundFileError) as exc:
        raise AudioFormatError(f"Not a readable RIFF/WAVE file: {path} ({exc})") from exc

    if info.format != "WAV":
        raise AudioFormatError(f"Not a RIFF/WAVE file: {path} (format {info.format})")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedCodecError(
            f"Unsupported WAV encoding {info.subtype} in {path}; expected PCM_16 or FLOAT"
        )

    if info.subtype == "PCM_16":
        data, rate = sf.read(str(path), dtype="int16", always_2d=True)
        samples = data[:, 0].astype(np.float64) / PCM16_SCALE
    else:
        data, rate = sf.read(str(path), dtype="float32", always_2d=True)
        samples = data[:, 0].astype(np.float64)

    return AudioSignal(samples, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to int16 codes (values must already be clipped)"""
    codes = np.rint(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(codes, -32768, 32767).astype("<i2")


def write_wav(signal: AudioSignal, path: Union[str, Path]) -> WriteResult:
    """Write a PCM 16-bit mono WAV; out-of-range samples are hard-clipped"""
    path = Path(path)
    if not path.parent.exists():
        raise AudioIOError(f"Output directory does not exist: {path.parent}")

    samples = signal.samples
    over = np.abs(samples) > 1.0
    clip_count = int(np.count_nonzero(over))
    if clip_count:
        logger.warning("Clipped %d of %d samples writing %s", clip_count, len(signal), path)
        samples = np.clip(samples, -1.0, 1.0)

    try:
        sf.write(str(path), quantize_pcm16(samples), signal.sample_rate_hz,
                 format="WAV", subtype="PCM_16")
    except (RuntimeError, OSError, sf.SoundFileError) as exc:
        raise AudioIOError(f"Cannot write {path}: {exc}") from exc

    return WriteResult(path=path, frames=len(signal), clip_count=clip_count)


def _kaiser(x: np.ndarray, beta: float = KAISER_BETA) -> np.ndarray:
    """Kaiser window evaluated at x in [-1, 1]; zero outside"""
    inside = np.abs(x) < 1.0
    arg = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    return np.where(inside, np.i0(beta * arg) / np.i0(beta), 0.0)


def resample(signal: AudioSignal, target_rate_hz: int, block: int = 8192) -> AudioSignal:
    """
    Band-limited resampling by windowed-sinc interpolation.

    Each output sample is a weighted sum of RESAMPLE_HALF_WIDTH input taps
    on either side of its position in the input time grid. The lowpass
    cutoff is the lower of the two Nyquist rates.
    """
    target_rate_hz = int(target_rate_hz)
    if target_rate_hz <= 0:
        raise DomainError(f"Target rate must be positive, got {target_rate_hz}")

    source_rate = signal.sample_rate_hz
    if target_rate_hz == source_rate:
        return AudioSignal(signal.samples.copy(), source_rate)

    ratio = target_rate_hz / source_rate
    n_out = int(round(len(signal) * ratio))
    return AudioSignal(resample_samples(signal.samples, ratio, n_out, block), target_rate_hz)


def resample_samples(samples: np.ndarray, ratio: float, n_out: int, block: int = 8192) -> np.ndarray:
    """Windowed-sinc interpolation of samples onto a grid `ratio` times denser"""
    n_in = len(samples)
    if n_in == 0 or n_out == 0:
        return np.zeros(n_out)

    step = 1.0 / ratio
    cutoff = min(1.0, ratio)
    half = RESAMPLE_HALF_WIDTH
    offsets = np.arange(-half + 1, half + 1)

    # point-mirror past both ends: value and slope stay continuous at the edges
    if n_in > 1:
        padded = np.pad(samples, (half, half + 2), mode="reflect", reflect_type="odd")
    else:
        padded = np.pad(samples, (half, half + 2), mode="edge")
    out = np.empty(n_out)

    for start in range(0, n_out, block):
        k = np.arange(start, min(start + block, n_out))
        position = k * step
        base = np.floor(position).astype(np.int64)
        taps = np.clip(base[:, None] + offsets[None, :], -half, n_in + half + 1)
        distance = position[:, None] - taps
        kernel = cutoff * np.sinc(cutoff * distance) * _kaiser(distance / half)
        kernel /= kernel.sum(axis=1, keepdims=True)
        out[k] = np.sum(padded[taps + half] * kernel, axis=1)

    return out


def signal_power(signal: AudioSignal) -> float:
    """Mean square of the samples"""
    if len(signal) == 0:
        raise DomainError("Cannot compute the power of an empty signal")
    return float(np.mean(signal.samples * signal.samples))


def power_db(power: float) -> float:
    """Power in dB (10*log10), -inf for silence"""
    if power <= 0.0:
        return float("-inf")
    return float(10.0 * np.log10(power))
