"""
Corpus Manifests

JSON-lines corpus records: one utterance per line with exactly the fields
utt_id, speaker_id, audio_path, transcript, condition_tag, duration_s.
Per-frame phone targets live in a sidecar alignment file keyed by utt_id.
"""

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Union

import numpy as np

from .errors import DataError

MANIFEST_FIELDS = ("utt_id", "speaker_id", "audio_path", "transcript", "condition_tag", "duration_s")

CONDITION_SUFFIX = re.compile(r"-(reverb_real_noise|reverb)$")
SPEED_SUFFIX = re.compile(r"-sp(\d+(?:\.\d+)?)$")


@dataclass(frozen=True)
class Utterance:
    """One segmented, transcribed recording"""

    utt_id: str
    speaker_id: str
    audio_path: str
    transcript: tuple
    condition_tag: str = "clean"
    duration_s: float = 0.0

    def __post_init__(self):
        words = self.transcript
        if isinstance(words, str):
            words = words.split()
        words = tuple(str(w).strip() for w in words)
        if any(not w for w in words):
            raise DataError(f"Empty transcript token in utterance {self.utt_id}")
        object.__setattr__(self, "transcript", words)
        if self.duration_s < 0:
            raise DataError(f"Negative duration for utterance {self.utt_id}")

    def to_record(self) -> Dict[str, object]:
        return {
            "utt_id": self.utt_id,
            "speaker_id": self.speaker_id,
            "audio_path": self.audio_path,
            "transcript": list(self.transcript),
            "condition_tag": self.condition_tag,
            "duration_s": self.duration_s,
        }

    @classmethod
    def from_record(cls, record: Dict[str, object]) -> "Utterance":
        missing = [f for f in MANIFEST_FIELDS if f not in record]
        extra = [f for f in record if f not in MANIFEST_FIELDS]
        if missing or extra:
            raise DataError(f"Manifest record fields mismatch: missing {missing}, unexpected {extra}")
        return cls(
            utt_id=str(record["utt_id"]),
            speaker_id=str(record["speaker_id"]),
            audio_path=str(record["audio_path"]),
            transcript=record["transcript"],
            condition_tag=str(record["condition_tag"]),
            duration_s=float(record["duration_s"]),
        )

    def derive(self, **changes) -> "Utterance":
        return replace(self, **changes)


@dataclass
class Manifest:
    """Ordered collection of utterances with unique ids"""

    utterances: List[Utterance] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for utt in self.utterances:
            if utt.utt_id in seen:
                raise DataError(f"Duplicate utt_id in manifest: {utt.utt_id}")
            seen.add(utt.utt_id)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def by_id(self) -> Dict[str, Utterance]:
        return {u.utt_id: u for u in self.utterances}

    def speakers(self) -> List[str]:
        """Distinct speaker ids in sorted order"""
        return sorted({u.speaker_id for u in self.utterances})

    def for_speakers(self, speakers: Iterable[str]) -> "Manifest":
        wanted = set(speakers)
        return Manifest([u for u in self.utterances if u.speaker_id in wanted], root=self.root)

    def subset(self, utt_ids: Iterable[str]) -> "Manifest":
        wanted = set(utt_ids)
        return Manifest([u for u in self.utterances if u.utt_id in wanted], root=self.root)

    def total_duration(self) -> float:
        return float(sum(u.duration_s for u in self.utterances))

    def condition_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for utt in self.utterances:
            counts[utt.condition_tag] = counts.get(utt.condition_tag, 0) + 1
        return counts

    def resolve_audio(self, utt: Utterance) -> Path:
        """Absolute path of an utterance's audio (relative paths are manifest-relative)"""
        path = Path(utt.audio_path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path


def read_manifest(path: Union[str, Path]) -> Manifest:
    """Load a JSON-lines manifest"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")

    utterances = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            utterances.append(Utterance.from_record(record))

    return Manifest(utterances, root=path.parent.resolve())


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    """Write a manifest as JSON-lines (atomic replace)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix(path.suffix + ".temp")
    with open(temp_file, "w", encoding="utf-8") as f:
        for utt in manifest:
            f.write(json.dumps(utt.to_record(), sort_keys=False) + "\n")
    temp_file.replace(path)
    return path


def source_utt_id(utt_id: str) -> str:
    """Strip speed-perturbation and condition suffixes to get the clean id"""
    base = SPEED_SUFFIX.sub("", utt_id)
    return CONDITION_SUFFIX.sub("", base)


def speed_factor_of(utt_id: str) -> float:
    match = SPEED_SUFFIX.search(utt_id)
    return float(match.group(1)) if match else 1.0


class Alignments:
    """Per-frame phone targets keyed by clean utterance id"""

    def __init__(self, targets: Optional[Dict[str, np.ndarray]] = None):
        self.targets: Dict[str, np.ndarray] = {
            k: np.asarray(v, dtype=np.int64) for k, v in (targets or {}).items()
        }

    def __contains__(self, utt_id: str) -> bool:
        return source_utt_id(utt_id) in self.targets

    def __len__(self) -> int:
        return len(self.targets)

    def add(self, utt_id: str, targets: Iterable[int]) -> None:
        self.targets[utt_id] = np.asarray(list(targets), dtype=np.int64)

    def for_utterance(self, utt_id: str, num_frames: int) -> np.ndarray:
        """
        Targets for any derived utterance id, stretched to num_frames.

        Augmented copies share the clean alignment (convolution keeps the
        length); speed-perturbed copies are mapped by nearest frame.
        """
        key = source_utt_id(utt_id)
        if key not in self.targets:
            raise DataError(f"No alignment for utterance {utt_id}")
        base = self.targets[key]
        if len(base) == num_frames:
            return base
        index = np.minimum((np.arange(num_frames) * len(base) / max(num_frames, 1)).astype(np.int64),
                           len(base) - 1)
        return base[index]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for utt_id in sorted(self.targets):
                f.write(json.dumps({"utt_id": utt_id, "targets": self.targets[utt_id].tolist()}) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Alignments":
        path = Path(path)
        if not path.exists():
            raise DataError(f"Alignment file not found: {path}")
        targets = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    record = json.loads(line)
                    targets[record["utt_id"]] = record["targets"]
        return cls(targets)
