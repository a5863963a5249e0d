"""
Synthetic Corpus Generator

Desk-scale stand-in for a transcribed speech corpus. Every "word" is one
phone class rendered as a three-formant tone complex; silence separates
some words. Frame-level targets are known by construction, so no forced
alignment is needed. Speakers shift all formants by a private factor and
tilt their spectrum.

Rooms and noise recordings for augmentation are synthesized the same way:
exponentially decaying noise tails behind a direct-path impulse, and a
handful of stationary noise types.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import lfilter

from .audio import AudioSignal, CORPUS_RATE_HZ, write_wav
from .config import AugmentationSpec, Condition
from .errors import ConfigError
from .manifest import Alignments, Manifest, Utterance, write_manifest
from .plugins.augment import NoisePool, RoomGroup, augment_utterance
from .plugins.evaluation import SymbolTable
from .seeding import derive_rng

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

FRAME_SHIFT = 160
FRAME_LENGTH = 400
SILENCE = 0
SILENCE_WORD = "<sil>"

MANIFEST_FILE = "manifest.jsonl"
ALIGNMENT_FILE = "alignments.jsonl"
SYMBOL_FILE = "words.txt"


@dataclass
class SyntheticCorpus:
    manifest: Manifest
    alignments: Alignments
    symbols: SymbolTable
    root: Optional[Path] = None

    @property
    def manifest_path(self) -> Optional[Path]:
        return self.root / MANIFEST_FILE if self.root else None

    @property
    def alignment_path(self) -> Optional[Path]:
        return self.root / ALIGNMENT_FILE if self.root else None

    @property
    def symbol_path(self) -> Optional[Path]:
        return self.root / SYMBOL_FILE if self.root else None


def phone_inventory(phone_classes: int, seed: int) -> np.ndarray:
    """(phone_classes, 3) formant frequencies; row 0 (silence) is unused"""
    if phone_classes < 3:
        raise ConfigError(f"Need silence plus at least two phone classes, got {phone_classes}")
    rng = derive_rng(seed, "phones")
    formants = np.zeros((phone_classes, 3))
    formants[1:, 0] = rng.uniform(250.0, 900.0, phone_classes - 1)
    formants[1:, 1] = rng.uniform(950.0, 2600.0, phone_classes - 1)
    formants[1:, 2] = rng.uniform(2700.0, 5000.0, phone_classes - 1)
    return formants


def symbol_table(phone_classes: int) -> SymbolTable:
    words = {SILENCE: SILENCE_WORD}
    words.update({p: f"w{p:02d}" for p in range(1, phone_classes)})
    return SymbolTable(words)


def _speaker_traits(seed: int, speaker_id: str) -> Tuple[float, np.ndarray]:
    rng = derive_rng(seed, "speaker", speaker_id)
    return float(rng.uniform(0.88, 1.12)), rng.uniform(0.5, 1.0, 3) * np.array([1.0, 0.6, 0.3])


def _segments(rng: np.random.Generator, phone_classes: int,
              words_per_utt: Tuple[int, int]) -> List[Tuple[int, int]]:
    """(phone, num_frames) runs; no two adjacent words share a phone"""
    count = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
    runs = [(SILENCE, int(rng.integers(3, 11)))]
    previous = SILENCE
    for index in range(count):
        phone = previous
        while phone == previous:
            phone = int(rng.integers(1, phone_classes))
        runs.append((phone, int(rng.integers(8, 21))))
        previous = phone
        if index < count - 1 and rng.random() < 0.5:
            runs.append((SILENCE, int(rng.integers(3, 11))))
            previous = SILENCE
    runs.append((SILENCE, int(rng.integers(3, 11))))
    return runs


def frame_targets(runs: Sequence[Tuple[int, int]]) -> np.ndarray:
    return np.concatenate([np.full(n, phone, dtype=np.int64) for phone, n in runs])


def render(targets: np.ndarray, formants: np.ndarray, warp: float, amplitudes: np.ndarray,
           rng: np.random.Generator, rate: int = CORPUS_RATE_HZ) -> np.ndarray:
    """
    Waveform whose MFCC frame t is centred on the segment of targets[t].
    Length is T*160 + 240 samples, which frames to exactly T frames.
    """
    num_frames = len(targets)
    n = num_frames * FRAME_SHIFT + (FRAME_LENGTH - FRAME_SHIFT)
    slot = np.clip((np.arange(n) - (FRAME_LENGTH - FRAME_SHIFT) // 2) // FRAME_SHIFT, 0, num_frames - 1)
    labels = targets[slot]
    t = np.arange(n) / rate
    out = rng.normal(0.0, 1e-3, n)

    boundaries = np.flatnonzero(np.diff(labels)) + 1
    for start, stop in zip(np.r_[0, boundaries], np.r_[boundaries, n]):
        phone = int(labels[start])
        if phone == SILENCE:
            continue
        segment = t[start:stop]
        ramp = np.minimum(1.0, np.minimum(np.arange(stop - start), np.arange(stop - start)[::-1]) / 80.0)
        for k in range(3):
            freq = min(formants[phone, k] * warp, 0.45 * rate)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out[start:stop] += 0.25 * amplitudes[k] * ramp * np.sin(2.0 * np.pi * freq * segment + phase)
    return out


def plan_corpus(num_speakers: int, utts_per_speaker: int, phone_classes: int, seed: int,
                speaker_prefix: str = "spk",
                words_per_utt: Tuple[int, int] = (2, 5)) -> Tuple[Manifest, Alignments, Dict[str, List]]:
    """Manifest, alignments and segment runs without rendering any audio"""
    if num_speakers < 1 or utts_per_speaker < 1:
        raise ConfigError("Corpus needs at least one speaker and one utterance per speaker")
    if phone_classes < 3:
        raise ConfigError(f"Need silence plus at least two phone classes, got {phone_classes}")
    utterances, alignments, runs_by_utt = [], Alignments(), {}
    for s in range(num_speakers):
        speaker_id = f"{speaker_prefix}{s:03d}"
        for u in range(utts_per_speaker):
            utt_id = f"{speaker_id}-u{u:03d}"
            runs = _segments(derive_rng(seed, "utt", utt_id), phone_classes, words_per_utt)
            targets = frame_targets(runs)
            transcript = [f"w{phone:02d}" for phone, _ in runs if phone != SILENCE]
            num_samples = len(targets) * FRAME_SHIFT + (FRAME_LENGTH - FRAME_SHIFT)
            utterances.append(Utterance(
                utt_id=utt_id, speaker_id=speaker_id, audio_path=f"audio/{speaker_id}/{utt_id}.wav",
                transcript=transcript, condition_tag=Condition.CLEAN.value,
                duration_s=num_samples / CORPUS_RATE_HZ,
            ))
            alignments.add(utt_id, targets)
            runs_by_utt[utt_id] = runs
    return Manifest(utterances), alignments, runs_by_utt


def synth_corpus(out_dir: Union[str, Path], num_speakers: int, utts_per_speaker: int,
                 phone_classes: int, seed: int, speaker_prefix: str = "spk",
                 words_per_utt: Tuple[int, int] = (2, 5)) -> SyntheticCorpus:
    """Render a seeded synthetic corpus with audio, manifest, alignments and symbol table"""
    out_dir = Path(out_dir)
    manifest, alignments, _ = plan_corpus(num_speakers, utts_per_speaker, phone_classes, seed,
                                          speaker_prefix, words_per_utt)
    formants = phone_inventory(phone_classes, seed)

    for utt in manifest:
        warp, amplitudes = _speaker_traits(seed, utt.speaker_id)
        samples = render(alignments.targets[utt.utt_id], formants, warp, amplitudes,
                         derive_rng(seed, "render", utt.utt_id))
        path = out_dir / utt.audio_path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(AudioSignal(samples, CORPUS_RATE_HZ), path)

    manifest.root = out_dir.resolve()
    write_manifest(manifest, out_dir / MANIFEST_FILE)
    alignments.save(out_dir / ALIGNMENT_FILE)
    symbols = symbol_table(phone_classes)
    symbols.save(out_dir / SYMBOL_FILE)
    logger.info("Synthesized %d utterances from %d speakers in %s", len(manifest), num_speakers, out_dir)
    return SyntheticCorpus(manifest, alignments, symbols, out_dir)


def synth_rir(rng: np.random.Generator, rt60_s: float, rate: int = CORPUS_RATE_HZ) -> np.ndarray:
    """Direct-path impulse followed by an exponentially decaying noise tail"""
    length = max(64, int(0.5 * rt60_s * rate))
    delay = int(rng.integers(8, 64))
    t = np.arange(length) / rate
    h = np.clip(rng.standard_normal(length) * np.exp(-6.9 * t / rt60_s) * 0.3, -0.9, 0.9)
    h[:delay] = 0.0
    h[delay] = 1.0
    return h


def synth_noise(rng: np.random.Generator, kind: str, seconds: float = 2.0,
                rate: int = CORPUS_RATE_HZ) -> np.ndarray:
    n = int(seconds * rate)
    t = np.arange(n) / rate
    if kind == "white":
        noise = rng.standard_normal(n)
    elif kind == "brown":
        noise = lfilter([1.0], [1.0, -0.98], rng.standard_normal(n))
    elif kind == "hum":
        base = rng.uniform(45.0, 65.0)
        noise = sum(np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 6))
    elif kind == "babble":
        noise = np.zeros(n)
        for _ in range(6):
            envelope = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
            noise += envelope * np.sin(2 * np.pi * rng.uniform(150.0, 3000.0) * t)
    else:
        raise ConfigError(f"Unknown noise kind {kind!r}")
    return 0.1 * noise / np.max(np.abs(noise))


NOISE_KINDS = ("white", "brown", "hum", "babble")


def synth_environment(out_dir: Union[str, Path], seed: int, key: str = "train", num_rooms: int = 3,
                      positions: int = 3, num_noises: int = 4) -> Tuple[Path, Path]:
    """Write rirs/<room>/<position>.wav with rooms.json, and noises/*.wav; returns both dirs"""
    out_dir = Path(out_dir)
    rir_dir, noise_dir = out_dir / "rirs", out_dir / "noises"
    noise_dir.mkdir(parents=True, exist_ok=True)
    metadata = {}

    for r in range(num_rooms):
        room_id = f"{key}-room{r}"
        rng = derive_rng(seed, "room", key, r)
        rt60 = float(rng.uniform(0.15, 0.6))
        metadata[room_id] = {"size_class": "small" if rt60 < 0.35 else "medium", "rt60_s": rt60}
        (rir_dir / room_id).mkdir(parents=True, exist_ok=True)
        for p in range(positions):
            write_wav(AudioSignal(synth_rir(rng, rt60), CORPUS_RATE_HZ), rir_dir / room_id / f"pos{p}.wav")
    (rir_dir / "rooms.json").write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")

    for k in range(num_noises):
        kind = NOISE_KINDS[k % len(NOISE_KINDS)]
        samples = synth_noise(derive_rng(seed, "noise", key, k), kind)
        write_wav(AudioSignal(samples, CORPUS_RATE_HZ), noise_dir / f"{key}-{kind}{k}.wav")

    return rir_dir, noise_dir


def corrupt_corpus(corpus: SyntheticCorpus, rooms: Sequence[RoomGroup], pool: NoisePool, seed: int,
                   out_dir: Union[str, Path], snr_db_range: Tuple[float, float] = (5.0, 15.0)) -> SyntheticCorpus:
    """
    Reverberant noisy copy of a corpus under its original utterance ids.

    Used with rooms and noises never seen by Stage-1 augmentation so the
    copy is acoustically mismatched to the source domain.
    """
    out_dir = Path(out_dir)
    spec = AugmentationSpec(condition=Condition.REVERB_REAL_NOISE, snr_db_range=snr_db_range, seed=seed)
    utterances = []
    for utt in corpus.manifest:
        result = augment_utterance(utt, spec, rooms, pool, manifest=corpus.manifest)
        path = out_dir / "audio" / utt.speaker_id / f"{utt.utt_id}.wav"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(result.audio, path)
        utterances.append(utt.derive(audio_path=str(path.relative_to(out_dir)), condition_tag="target"))

    manifest = Manifest(utterances, root=out_dir.resolve())
    write_manifest(manifest, out_dir / MANIFEST_FILE)
    corpus.alignments.save(out_dir / ALIGNMENT_FILE)
    corpus.symbols.save(out_dir / SYMBOL_FILE)
    return SyntheticCorpus(manifest, corpus.alignments, corpus.symbols, out_dir)
