"""
Augmentation Plugin

Synthesizes reverberant and noisy copies of a clean corpus. Speech is
convolved with a room impulse response h; in the noisy condition, up to
`max_superposed_noises` real noise recordings are summed first, convolved
with a second impulse response of the same room and mixed in at a random
SNR. Speed perturbation expands the result once more.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import oaconvolve

from ..audio import (AudioSignal, CORPUS_RATE_HZ, read_wav, resample, resample_samples,
                     signal_power, write_wav)
from ..config import AugmentationSpec, Condition
from ..errors import ConfigError, DegenerateInputError, DomainError
from ..manifest import Manifest, Utterance, write_manifest
from ..seeding import derive_rng

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

PEAK_TARGET = 0.99
ROOM_METADATA_FILE = "rooms.json"
SIZE_CLASSES = ("small", "medium")
MULTICONDITION = (Condition.CLEAN, Condition.REVERB, Condition.REVERB_REAL_NOISE)


@dataclass
class RoomGroup:
    """Impulse responses of one room measured at different positions"""

    room_id: str
    rirs: List[AudioSignal]
    size_class: str = "small"
    position_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.rirs:
            raise ConfigError(f"Room {self.room_id} has no impulse responses")
        if self.size_class not in SIZE_CLASSES:
            raise ConfigError(f"Room {self.room_id}: size_class must be one of {SIZE_CLASSES}, "
                              f"got {self.size_class!r}")
        rates = {rir.sample_rate_hz for rir in self.rirs}
        if len(rates) != 1:
            raise ConfigError(f"Room {self.room_id} mixes sample rates {sorted(rates)}")
        for rir in self.rirs:
            rir.require_valid(f"impulse response in room {self.room_id}")
        if not self.position_ids:
            self.position_ids = [f"pos{i}" for i in range(len(self.rirs))]

    @property
    def sample_rate_hz(self) -> int:
        return self.rirs[0].sample_rate_hz


@dataclass
class NoisePool:
    """Real-life noise recordings at the corpus sample rate"""

    recordings: List[AudioSignal]
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"noise{i}" for i in range(len(self.recordings))]
        if len(self.ids) != len(self.recordings):
            raise ConfigError("Noise pool ids and recordings differ in length")

    def __len__(self) -> int:
        return len(self.recordings)


@dataclass
class AugmentedUtterance:
    """Result of augmenting one utterance"""

    utterance: Utterance
    audio: Optional[AudioSignal]
    provenance: Dict[str, Any]


def load_rir_database(rir_dir: Union[str, Path], target_rate_hz: int = CORPUS_RATE_HZ) -> List[RoomGroup]:
    """
    Load room_id/position_id.wav files plus rooms.json metadata.

    Impulse responses are resampled to the corpus rate on ingestion.
    """
    rir_dir = Path(rir_dir)
    if not rir_dir.is_dir():
        raise ConfigError(f"RIR directory not found: {rir_dir}")

    metadata_file = rir_dir / ROOM_METADATA_FILE
    if not metadata_file.exists():
        raise ConfigError(f"Missing room metadata file: {metadata_file}")
    metadata = json.loads(metadata_file.read_text(encoding="utf-8"))

    rooms = []
    for room_dir in sorted(p for p in rir_dir.iterdir() if p.is_dir()):
        wavs = sorted(room_dir.glob("*.wav"))
        if not wavs:
            continue
        if room_dir.name not in metadata:
            raise ConfigError(f"Room {room_dir.name} missing from {metadata_file}")
        rirs = []
        for wav in wavs:
            rir = read_wav(wav)
            if rir.sample_rate_hz != target_rate_hz:
                rir = resample(rir, target_rate_hz)
            rirs.append(rir)
        rooms.append(RoomGroup(
            room_id=room_dir.name,
            rirs=rirs,
            size_class=metadata[room_dir.name].get("size_class", "small"),
            position_ids=[w.stem for w in wavs],
        ))

    logger.info("Loaded %d rooms (%d RIRs) from %s", len(rooms), sum(len(r.rirs) for r in rooms), rir_dir)
    return rooms


def load_noise_pool(noise_dir: Union[str, Path], target_rate_hz: int = CORPUS_RATE_HZ) -> NoisePool:
    """Load every *.wav under noise_dir, resampled to the corpus rate"""
    noise_dir = Path(noise_dir)
    if not noise_dir.is_dir():
        raise ConfigError(f"Noise directory not found: {noise_dir}")
    recordings, ids = [], []
    for wav in sorted(noise_dir.glob("*.wav")):
        noise = read_wav(wav)
        if noise.sample_rate_hz != target_rate_hz:
            noise = resample(noise, target_rate_hz)
        recordings.append(noise)
        ids.append(wav.stem)
    return NoisePool(recordings, ids)


def convolve_full(signal: AudioSignal, rir: AudioSignal) -> AudioSignal:
    """Linear convolution truncated to the input length, no normalization"""
    signal.require_valid("signal")
    rir.require_valid("impulse response")
    if signal.sample_rate_hz != rir.sample_rate_hz:
        raise DomainError(
            f"Sample rate mismatch: signal {signal.sample_rate_hz} Hz, RIR {rir.sample_rate_hz} Hz"
        )
    out = oaconvolve(signal.samples, rir.samples, mode="full")[:len(signal)]
    return AudioSignal(out, signal.sample_rate_hz)


def peak_normalize(signal: AudioSignal) -> Tuple[AudioSignal, float]:
    """Scale to PEAK_TARGET only when the peak exceeds 1; returns the scale used"""
    peak = float(np.max(np.abs(signal.samples))) if len(signal) else 0.0
    if peak <= 1.0:
        return signal, 1.0
    scale = PEAK_TARGET / peak
    logger.debug("Peak %.4f above full scale, scaling by %.6f", peak, scale)
    return AudioSignal(signal.samples * scale, signal.sample_rate_hz), scale


def convolve(signal: AudioSignal, rir: AudioSignal) -> AudioSignal:
    """Reverberate a signal (FFT overlap-add), peak-normalized on overshoot"""
    out, _ = peak_normalize(convolve_full(signal, rir))
    return out


def mix_at_snr(speech: AudioSignal, noise: AudioSignal, snr_db: float) -> AudioSignal:
    """speech + g * noise with g chosen so the addends have the requested SNR"""
    if speech.sample_rate_hz != noise.sample_rate_hz:
        raise DomainError(
            f"Sample rate mismatch: speech {speech.sample_rate_hz} Hz, noise {noise.sample_rate_hz} Hz"
        )
    if len(noise) < len(speech):
        raise DomainError(f"Noise shorter than speech ({len(noise)} < {len(speech)} samples)")

    p_speech = signal_power(speech)
    segment = noise.samples[:len(speech)]
    p_noise = float(np.mean(segment * segment)) if len(segment) else 0.0
    if p_speech <= 0.0 or p_noise <= 0.0:
        raise DegenerateInputError(
            f"Cannot mix at an SNR with zero power (speech {p_speech:g}, noise {p_noise:g})"
        )

    gain = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioSignal(speech.samples + gain * segment, speech.sample_rate_hz)


def snr_gain(speech: AudioSignal, noise: AudioSignal, snr_db: float) -> float:
    """The gain mix_at_snr applies to the noise"""
    segment = noise.samples[:len(speech)]
    return float(np.sqrt(signal_power(speech) / (np.mean(segment * segment) * 10.0 ** (snr_db / 10.0))))


def superpose_noises(pool: NoisePool, count: int, target_len: int,
                     rng: np.random.Generator,
                     record: Optional[Dict[str, Any]] = None) -> AudioSignal:
    """
    Sum `count` distinct noise recordings, each looped or cropped to
    target_len from a random start offset. Draws are written to `record`.
    """
    if len(pool) == 0:
        raise ConfigError("Noise pool is empty")
    if count < 1:
        raise DomainError(f"Noise count must be at least 1, got {count}")

    rate = pool.recordings[0].sample_rate_hz
    chosen = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    total = np.zeros(target_len)
    ids, offsets = [], []

    for index in chosen:
        noise = pool.recordings[int(index)].samples
        n = len(noise)
        if n == 0:
            raise DomainError(f"Noise recording {pool.ids[int(index)]} is empty")
        if n >= target_len:
            offset = int(rng.integers(0, n - target_len + 1))
            total += noise[offset:offset + target_len]
        else:
            offset = int(rng.integers(0, n))
            total += noise[(offset + np.arange(target_len)) % n]
        ids.append(pool.ids[int(index)])
        offsets.append(offset)

    if record is not None:
        record["noise_ids"] = ids
        record["noise_offsets"] = offsets
    return AudioSignal(total, rate)


def speed_perturb(signal: AudioSignal, factor: float) -> AudioSignal:
    """Change playback rate; output has round(len / factor) samples at the original rate"""
    if factor <= 0:
        raise DomainError(f"Speed factor must be positive, got {factor}")
    if factor == 1.0:
        return AudioSignal(signal.samples.copy(), signal.sample_rate_hz)
    n_out = int(round(len(signal) / factor))
    return AudioSignal(resample_samples(signal.samples, 1.0 / factor, n_out), signal.sample_rate_hz)


def _pick_room(rooms: Sequence[RoomGroup], rng: np.random.Generator,
               record: Dict[str, Any], second_position: bool) -> Tuple[AudioSignal, Optional[AudioSignal]]:
    room = rooms[int(rng.integers(len(rooms)))]
    n_positions = len(room.rirs)
    first = int(rng.integers(n_positions))
    record["room"] = room.room_id
    record["rir_position"] = room.position_ids[first]
    if not second_position:
        return room.rirs[first], None

    if n_positions > 1:
        second = int(rng.integers(n_positions - 1))
        if second >= first:
            second += 1
    else:
        second = first
    record["noise_rir_position"] = room.position_ids[second]
    return room.rirs[first], room.rirs[second]


def augment_utterance(utt: Utterance, spec: AugmentationSpec, rooms: Sequence[RoomGroup],
                      pool: Optional[NoisePool], clean: Optional[AudioSignal] = None,
                      manifest: Optional[Manifest] = None) -> AugmentedUtterance:
    """Produce the `spec.condition` copy of one clean utterance"""
    condition = Condition(spec.condition)
    if condition == Condition.CLEAN:
        return AugmentedUtterance(
            utterance=utt.derive(condition_tag=Condition.CLEAN.value),
            audio=clean,
            provenance={"utt_id": utt.utt_id, "source": utt.utt_id, "condition": "clean"},
        )

    if not rooms:
        raise ConfigError(f"Condition {condition.value} needs at least one room impulse response")
    if condition == Condition.REVERB_REAL_NOISE and (pool is None or len(pool) == 0):
        raise ConfigError("Condition reverb_real_noise needs a non-empty noise pool")

    if clean is None:
        path = manifest.resolve_audio(utt) if manifest is not None else Path(utt.audio_path)
        clean = read_wav(path)

    new_id = f"{utt.utt_id}-{condition.value}"
    rng = derive_rng(spec.seed, utt.utt_id, condition.value)
    record: Dict[str, Any] = {"utt_id": new_id, "source": utt.utt_id, "condition": condition.value}

    if condition == Condition.REVERB:
        h, _ = _pick_room(rooms, rng, record, second_position=False)
        out, scale = peak_normalize(convolve_full(clean, h))
    else:
        h, h_noise = _pick_room(rooms, rng, record, second_position=True)
        low, high = spec.snr_db_range
        snr_db = float(rng.uniform(low, high))
        count = int(rng.integers(1, spec.max_superposed_noises + 1))
        reverberant = convolve_full(clean, h)
        noise = superpose_noises(pool, count, len(clean), rng, record)
        reverberant_noise = convolve_full(noise, h_noise)
        out, scale = peak_normalize(mix_at_snr(reverberant, reverberant_noise, snr_db))
        record["snr_db"] = snr_db
        record["noise_count"] = count

    record["scale"] = scale
    return AugmentedUtterance(
        utterance=utt.derive(utt_id=new_id, condition_tag=condition.value),
        audio=out,
        provenance=record,
    )


def build_multicondition(manifest: Manifest, rooms: Sequence[RoomGroup], pool: NoisePool,
                         seed: int, out_dir: Union[str, Path],
                         spec: Optional[AugmentationSpec] = None, jobs: int = 1) -> Manifest:
    """
    Clean set plus one reverb and one reverb+noise copy of every utterance.

    Each copy draws from a generator seeded by (seed, utt_id, condition), so
    audio is identical whatever the input order or the number of workers.
    Audio goes to out_dir/<condition>/<utt_id>.wav, every draw to
    out_dir/provenance.jsonl and the merged list to out_dir/manifest.jsonl.
    """
    out_dir = Path(out_dir)
    base_spec = spec or AugmentationSpec()
    base_spec = base_spec.model_copy(update={"seed": seed})
    for condition in MULTICONDITION[1:]:
        (out_dir / condition.value).mkdir(parents=True, exist_ok=True)

    def process(utt: Utterance) -> List[AugmentedUtterance]:
        clean_path = manifest.resolve_audio(utt)
        clean = read_wav(clean_path)
        results = []
        for condition in MULTICONDITION:
            result = augment_utterance(utt, base_spec.model_copy(update={"condition": condition}),
                                       rooms, pool, clean=clean)
            if condition == Condition.CLEAN:
                result.utterance = result.utterance.derive(audio_path=str(clean_path.resolve()))
            else:
                wav_path = out_dir / condition.value / f"{result.utterance.utt_id}.wav"
                written = write_wav(result.audio, wav_path)
                result.provenance["clip_count"] = written.clip_count
                result.utterance = result.utterance.derive(audio_path=str(wav_path.resolve()))
                result.audio = None
            results.append(result)
        return results

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            grouped = list(executor.map(process, manifest.utterances))
    else:
        grouped = [process(utt) for utt in manifest.utterances]

    utterances = [r.utterance for group in grouped for r in group]
    output = Manifest(utterances, root=out_dir.resolve())

    provenance = sorted((r.provenance for group in grouped for r in group), key=lambda p: p["utt_id"])
    with open(out_dir / "provenance.jsonl", "w", encoding="utf-8") as f:
        for entry in provenance:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(output, out_dir / "manifest.jsonl")

    logger.info("Multi-condition set: %d utterances (%s)", len(output), output.condition_counts())
    return output


def speed_perturb_manifest(manifest: Manifest, out_dir: Union[str, Path],
                           factors: Sequence[float] = (0.9, 1.0, 1.1), jobs: int = 1) -> Manifest:
    """Expand a training list once per speed factor (factor 1.0 keeps the original entry)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(utt: Utterance) -> List[Utterance]:
        source = manifest.resolve_audio(utt)
        audio = None
        results = []
        for factor in factors:
            if factor == 1.0:
                results.append(utt.derive(audio_path=str(source.resolve())))
                continue
            if audio is None:
                audio = read_wav(source)
            perturbed = speed_perturb(audio, factor)
            new_id = f"{utt.utt_id}-sp{factor:g}"
            wav_path = out_dir / f"{new_id}.wav"
            write_wav(perturbed, wav_path)
            results.append(utt.derive(utt_id=new_id, audio_path=str(wav_path.resolve()),
                                      duration_s=perturbed.duration_s))
        return results

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            grouped = list(executor.map(process, manifest.utterances))
    else:
        grouped = [process(utt) for utt in manifest.utterances]

    return Manifest([u for group in grouped for u in group], root=out_dir.resolve())


def plan_multicondition(manifest: Manifest) -> Manifest:
    """Manifest build_multicondition will produce, without touching audio"""
    utterances = []
    for utt in manifest:
        for condition in MULTICONDITION:
            if condition == Condition.CLEAN:
                utterances.append(utt.derive(condition_tag=condition.value))
                continue
            new_id = f"{utt.utt_id}-{condition.value}"
            utterances.append(utt.derive(utt_id=new_id, condition_tag=condition.value,
                                         audio_path=f"{condition.value}/{new_id}.wav"))
    return Manifest(utterances, root=manifest.root)
