"""
Feature Extraction Plugin

Turns audio into the acoustic model's per-frame input: 40 MFCCs spliced
over five frames plus a 100-dimensional recording embedding repeated on
every frame of the recording.
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import scipy.fft

from ..audio import AudioSignal, read_wav
from ..config import FeatureConfig
from ..errors import DataError, DomainError
from ..manifest import Manifest

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

ARCHIVE_MAGIC = b"TSFEAT01"
ARCHIVE_HEADER = struct.Struct("<8sII")
INDEX_FILE = "index.jsonl"


@dataclass
class FeatureMatrix:
    """T x D frames with their framing parameters"""

    frames: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


@dataclass
class RecordingEmbedding:
    """Fixed per-recording conditioning vector"""

    vector: np.ndarray
    source_id: str = ""

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def frame_count(num_samples: int, window: int, shift: int) -> int:
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // shift


def povey_window(length: int) -> np.ndarray:
    """Hann window raised to 0.85"""
    n = np.arange(length)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / (length - 1))) ** 0.85


def hz_to_mel(freq: np.ndarray) -> np.ndarray:
    return 1127.0 * np.log1p(np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


@lru_cache(maxsize=16)
def mel_filterbank(num_bins: int, fft_size: int, sample_rate_hz: int,
                   low_hz: float, high_hz: float) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape (num_bins, fft_size//2 + 1)"""
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_bins + 2))
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    filters = np.zeros((num_bins, bin_freqs.shape[0]))
    for m in range(num_bins):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        filters[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    filters.setflags(write=False)
    return filters


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix M with coefficients = M @ x"""
    return scipy.fft.dct(np.eye(n), type=2, norm="ortho", axis=0)


def compute_mfcc(signal: AudioSignal, config: Optional[FeatureConfig] = None) -> FeatureMatrix:
    """
    MFCCs: pre-emphasis, Povey window, power spectrum, mel filterbank,
    floored log, orthonormal DCT-II.
    """
    config = config or FeatureConfig()
    if signal.sample_rate_hz != config.sample_rate_hz:
        raise DomainError(f"Expected {config.sample_rate_hz} Hz audio, got {signal.sample_rate_hz} Hz")

    window = int(round(config.sample_rate_hz * config.frame_length_ms / 1000.0))
    shift = int(round(config.sample_rate_hz * config.frame_shift_ms / 1000.0))
    if len(signal) < window:
        raise DomainError(f"Signal of {len(signal)} samples is shorter than one {window}-sample window")

    samples = signal.samples
    emphasized = np.empty_like(samples)
    emphasized[0] = samples[0]
    emphasized[1:] = samples[1:] - config.preemphasis * samples[:-1]

    num_frames = frame_count(len(samples), window, shift)
    index = np.arange(window)[None, :] + shift * np.arange(num_frames)[:, None]
    frames = emphasized[index] * povey_window(window)[None, :]

    fft_size = 1 << (window - 1).bit_length()
    power = np.abs(scipy.fft.rfft(frames, n=fft_size, axis=1)) ** 2
    filters = mel_filterbank(config.num_mel_bins, fft_size, config.sample_rate_hz,
                             config.low_freq_hz, config.high_freq_hz)
    log_mel = np.log(np.maximum(power @ filters.T, config.log_floor))
    ceps = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :config.num_ceps]

    if config.apply_cmn:
        ceps = ceps - ceps.mean(axis=0, keepdims=True)

    return FeatureMatrix(ceps, config.frame_shift_ms, config.frame_length_ms)


def splice(frames: FeatureMatrix, left: int = 2, right: int = 2) -> FeatureMatrix:
    """Concatenate frames t-left..t+right, replicating edge frames"""
    data = frames.frames
    num_frames = data.shape[0]
    offsets = np.arange(-left, right + 1)
    index = np.clip(np.arange(num_frames)[:, None] + offsets[None, :], 0, num_frames - 1)
    spliced = data[index].reshape(num_frames, -1)
    return FeatureMatrix(spliced, frames.frame_shift_ms, frames.frame_length_ms)


@lru_cache(maxsize=8)
def projection_matrix(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """Fixed random matrix with orthonormal columns, shape (out_dim, in_dim)"""
    if in_dim > out_dim:
        raise DomainError(f"Cannot embed {in_dim} dims into {out_dim} with orthonormal columns")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((out_dim, in_dim)))
    q = q * np.sign(np.diag(r))[None, :]
    q.setflags(write=False)
    return q


def recording_embedding(frames: FeatureMatrix, seed: int = FeatureConfig().embedding_seed,
                        dim: int = 100, source_id: str = "") -> RecordingEmbedding:
    """Per-recording mean and std of the frames, projected to `dim`"""
    if frames.num_frames < 1:
        raise DomainError("Cannot embed a recording with no frames")
    stats = np.concatenate([frames.frames.mean(axis=0), frames.frames.std(axis=0)])
    vector = projection_matrix(stats.shape[0], dim, seed) @ stats
    return RecordingEmbedding(vector, source_id)


def assemble_input(spliced: FeatureMatrix, embedding: RecordingEmbedding,
                   spliced_dim: int = 200, embedding_dim: int = 100) -> np.ndarray:
    """Append the embedding to every spliced frame"""
    if spliced.dim != spliced_dim or embedding.dim != embedding_dim:
        raise DomainError(
            f"Expected spliced dim {spliced_dim} and embedding dim {embedding_dim}, "
            f"got {spliced.dim} and {embedding.dim}"
        )
    tiled = np.broadcast_to(embedding.vector, (spliced.num_frames, embedding.dim))
    return np.concatenate([spliced.frames, tiled], axis=1)


class FeatureExtractor:
    """Full front end for one configuration"""

    def __init__(self, config: Optional[FeatureConfig] = None):
        self.config = config or FeatureConfig()

    @property
    def spliced_dim(self) -> int:
        return self.config.num_ceps * (1 + self.config.splice_left + self.config.splice_right)

    @property
    def input_dim(self) -> int:
        return self.spliced_dim + self.config.embedding_dim

    def num_frames(self, num_samples: int) -> int:
        window = int(round(self.config.sample_rate_hz * self.config.frame_length_ms / 1000.0))
        shift = int(round(self.config.sample_rate_hz * self.config.frame_shift_ms / 1000.0))
        return frame_count(num_samples, window, shift)

    def compute(self, signal: AudioSignal, source_id: str = "") -> np.ndarray:
        """T x input_dim network input for one recording"""
        mfcc = compute_mfcc(signal, self.config)
        spliced = splice(mfcc, self.config.splice_left, self.config.splice_right)
        embedding = recording_embedding(mfcc, self.config.embedding_seed,
                                        self.config.embedding_dim, source_id)
        return assemble_input(spliced, embedding, self.spliced_dim, self.config.embedding_dim)

    def extract(self, manifest: Manifest, out_dir: Union[str, Path], jobs: int = 1) -> "FeatureIndex":
        """Write one archive per utterance plus a JSON-lines index"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def process(utt) -> Dict[str, object]:
            features = self.compute(read_wav(manifest.resolve_audio(utt)), utt.utt_id)
            path = out_dir / f"{utt.utt_id}.feats"
            write_feature_archive(features, path)
            return {"utt_id": utt.utt_id, "path": path.name,
                    "num_frames": int(features.shape[0]), "dim": int(features.shape[1])}

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as executor:
                entries = list(executor.map(process, manifest.utterances))
        else:
            entries = [process(utt) for utt in manifest.utterances]

        with open(out_dir / INDEX_FILE, "w", encoding="utf-8") as f:
            for entry in entries:
                f.write(json.dumps(entry) + "\n")
        logger.info("Extracted features for %d utterances into %s", len(entries), out_dir)
        return FeatureIndex(out_dir, entries)


def write_feature_archive(features: np.ndarray, path: Union[str, Path]) -> Path:
    """16-byte header (magic, T, D) then little-endian float32 T x D"""
    path = Path(path)
    data = np.ascontiguousarray(features, dtype="<f4")
    if data.ndim != 2:
        raise DomainError(f"Feature archive needs a 2-D matrix, got shape {data.shape}")
    with open(path, "wb") as f:
        f.write(ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, data.shape[0], data.shape[1]))
        f.write(data.tobytes())
    return path


def read_feature_archive(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < ARCHIVE_HEADER.size:
        raise DataError(f"Truncated feature archive: {path}")
    magic, num_frames, dim = ARCHIVE_HEADER.unpack_from(raw)
    if magic != ARCHIVE_MAGIC:
        raise DataError(f"Bad feature archive magic in {path}")
    expected = ARCHIVE_HEADER.size + 4 * num_frames * dim
    if len(raw) != expected:
        raise DataError(f"Feature archive {path} has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=ARCHIVE_HEADER.size).reshape(num_frames, dim)
    return data.astype(np.float64)


class FeatureIndex:
    """utt_id -> archive lookup for an extracted feature directory"""

    def __init__(self, root: Union[str, Path], entries: List[Dict[str, object]]):
        self.root = Path(root)
        self.entries = {str(e["utt_id"]): e for e in entries}

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, utt_id: str) -> np.ndarray:
        if utt_id not in self.entries:
            raise DataError(f"No features for utterance {utt_id}")
        return read_feature_archive(self.root / str(self.entries[utt_id]["path"]))

    @classmethod
    def open(cls, root: Union[str, Path]) -> "FeatureIndex":
        root = Path(root)
        index_file = root / INDEX_FILE
        if not index_file.exists():
            raise DataError(f"Feature index not found: {index_file}")
        with open(index_file, "r", encoding="utf-8") as f:
            entries = [json.loads(line) for line in f if line.strip()]
        return cls(root, entries)
