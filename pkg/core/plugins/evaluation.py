"""
Evaluation Plugin

Word alignment and WER scoring, leave-one-speaker-out fold planning, and
the aggregate statistics reported per setup: word-count weighted mean WER,
boxplot summaries, per-speaker relative improvements and ablation deltas.
"""

import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import ScoringOptions
from ..errors import ConfigError, DataError, DomainError
from ..manifest import Manifest
from .acoustic_model import AcousticModel, Checkpoint
from .trainer import SETUPS, TrainingData

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

CORRECT, SUBSTITUTION, DELETION, INSERTION = "C", "S", "D", "I"


@dataclass
class AlignmentResult:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    correct: int = 0
    ref_len: int = 0
    operations: List[Tuple[str, Optional[str], Optional[str]]] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def _tokens(words: Union[str, Sequence[str]], normalize: bool) -> List[str]:
    if isinstance(words, str):
        words = words.split()
    tokens = [w.strip() for w in words if w.strip()]
    return [w.lower() for w in tokens] if normalize else tokens


def align_words(ref: Union[str, Sequence[str]], hyp: Union[str, Sequence[str]],
                normalize: bool = False) -> AlignmentResult:
    """
    Minimum edit-distance alignment with unit costs.

    Among equal-cost paths the backtrace prefers correct, then
    substitution, then deletion, then insertion.
    """
    ref = _tokens(ref, normalize)
    hyp = _tokens(hyp, normalize)
    n, m = len(ref), len(hyp)

    cost = [[i + j if i == 0 or j == 0 else 0 for j in range(m + 1)] for i in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diagonal = cost[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            cost[i][j] = min(diagonal, cost[i - 1][j] + 1, cost[i][j - 1] + 1)

    result = AlignmentResult(ref_len=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and cost[i][j] == cost[i - 1][j - 1]:
            result.operations.append((CORRECT, ref[i - 1], hyp[j - 1]))
            result.correct += 1
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and ref[i - 1] != hyp[j - 1] and cost[i][j] == cost[i - 1][j - 1] + 1:
            result.operations.append((SUBSTITUTION, ref[i - 1], hyp[j - 1]))
            result.substitutions += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            result.operations.append((DELETION, ref[i - 1], None))
            result.deletions += 1
            i -= 1
        else:
            result.operations.append((INSERTION, None, hyp[j - 1]))
            result.insertions += 1
            j -= 1

    result.operations.reverse()
    return result


def wer(alignment: AlignmentResult) -> float:
    if alignment.ref_len == 0:
        raise DomainError("WER is undefined for an empty reference")
    return alignment.errors / alignment.ref_len


def weighted_average_wer(per_speaker: Iterable[Tuple[float, int]]) -> float:
    """Sum of wer_i * N_i over the sum of N_i"""
    pairs = list(per_speaker)
    total_words = sum(count for _, count in pairs)
    if total_words <= 0:
        raise DomainError("Weighted WER needs at least one reference word")
    return sum(w * count for w, count in pairs) / total_words


def relative_improvement(baseline_wer: float, system_wer: float) -> float:
    """Percent reduction of system_wer relative to baseline_wer (negative when worse)"""
    if baseline_wer == 0:
        raise DomainError("Relative improvement over a zero baseline WER is undefined")
    return 100.0 * (baseline_wer - system_wer) / baseline_wer


@dataclass
class Fold:
    held_out: str
    train_utt_ids: List[str]
    eval_utt_ids: List[str]


@dataclass
class FoldPlan:
    folds: List[Fold]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def loso_folds(manifest: Manifest) -> FoldPlan:
    """One fold per speaker, ordered by speaker id"""
    speakers = manifest.speakers()
    if len(speakers) < 2:
        raise ConfigError(f"Leave-one-speaker-out needs at least 2 speakers, got {len(speakers)}")
    folds = []
    for speaker in speakers:
        folds.append(Fold(
            held_out=speaker,
            train_utt_ids=[u.utt_id for u in manifest if u.speaker_id != speaker],
            eval_utt_ids=[u.utt_id for u in manifest if u.speaker_id == speaker],
        ))
    return FoldPlan(folds)


@dataclass
class BoxplotStats:
    minimum: float
    whisker_low: float
    q1: float
    median: float
    q3: float
    whisker_high: float
    maximum: float
    mean: float
    outliers: List[float] = field(default_factory=list)


def boxplot_stats(values: Sequence[float]) -> BoxplotStats:
    """Linear-interpolation quartiles with whiskers at 1.5 IQR"""
    data = np.sort(np.asarray(values, dtype=np.float64))
    if data.size == 0:
        raise DomainError("Boxplot of an empty list")
    q1, median, q3 = (float(q) for q in np.percentile(data, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    low_fence, high_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = data[(data >= low_fence) & (data <= high_fence)]
    return BoxplotStats(
        minimum=float(data[0]),
        whisker_low=float(inside.min()),
        q1=q1,
        median=median,
        q3=q3,
        whisker_high=float(inside.max()),
        maximum=float(data[-1]),
        mean=float(data.mean()),
        outliers=[float(v) for v in data if v < low_fence or v > high_fence],
    )


class SymbolTable:
    """Phone-group id <-> word, read from `<word> <id>` lines"""

    def __init__(self, words: Mapping[int, str]):
        self.words = dict(words)
        self.ids = {w: i for i, w in self.words.items()}

    def __len__(self) -> int:
        return len(self.words)

    def word(self, symbol: int) -> str:
        if symbol not in self.words:
            raise DataError(f"Symbol id {symbol} is not in the symbol table")
        return self.words[symbol]

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SymbolTable":
        path = Path(path)
        if not path.exists():
            raise DataError(f"Symbol table not found: {path}")
        words = {}
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit():
                raise DataError(f"{path}:{line_no}: expected '<word> <id>'")
            words[int(parts[1])] = parts[0]
        return cls(words)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text("".join(f"{self.words[i]} {i}\n" for i in sorted(self.words)), encoding="utf-8")
        return path


def greedy_decode(log_posteriors: np.ndarray, symbols: SymbolTable, silence_symbol: int = 0) -> List[str]:
    """Frame argmax, collapse repeats, drop silence, map ids to words"""
    best = np.argmax(np.asarray(log_posteriors), axis=1)
    collapsed = [int(k) for k, _ in itertools.groupby(best.tolist())]
    return [symbols.word(s) for s in collapsed if s != silence_symbol]


@dataclass
class SpeakerScore:
    speaker_id: str
    wer: float
    word_count: int
    errors: int


@dataclass
class WerReport:
    setup: str
    per_speaker: List[SpeakerScore]
    aggregate: float
    boxplot: BoxplotStats

    def speaker_wers(self) -> Dict[str, float]:
        return {s.speaker_id: s.wer for s in self.per_speaker}


def score_speakers(references: Mapping[str, Sequence[str]], hypotheses: Mapping[str, Sequence[str]],
                   speaker_of: Mapping[str, str], normalize: bool = False) -> List[SpeakerScore]:
    """Pool alignment errors and reference words per speaker"""
    missing = sorted(set(references) - set(hypotheses))
    if missing:
        raise DataError(f"No hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    errors: Dict[str, int] = {}
    words: Dict[str, int] = {}
    for utt_id in sorted(references):
        alignment = align_words(references[utt_id], hypotheses[utt_id], normalize)
        speaker = speaker_of[utt_id]
        errors[speaker] = errors.get(speaker, 0) + alignment.errors
        words[speaker] = words.get(speaker, 0) + alignment.ref_len

    scores = []
    for speaker in sorted(errors):
        if words[speaker] == 0:
            raise DomainError(f"Speaker {speaker} has no reference words")
        scores.append(SpeakerScore(speaker, errors[speaker] / words[speaker], words[speaker], errors[speaker]))
    return scores


def build_report(setup: str, per_speaker: List[SpeakerScore]) -> WerReport:
    per_speaker = sorted(per_speaker, key=lambda s: s.speaker_id)
    return WerReport(
        setup=setup,
        per_speaker=per_speaker,
        aggregate=weighted_average_wer((s.wer, s.word_count) for s in per_speaker),
        boxplot=boxplot_stats([s.wer for s in per_speaker]),
    )


@dataclass
class EvaluationResult:
    hypotheses: Dict[str, List[str]]
    per_speaker: List[SpeakerScore]
    frame_accuracy: float


def evaluate_checkpoint(checkpoint: Checkpoint, data: TrainingData, manifest: Manifest,
                        symbols: SymbolTable, options: Optional[ScoringOptions] = None) -> EvaluationResult:
    """Greedy-decode every utterance of `data` and score it against the manifest transcripts"""
    options = options or ScoringOptions()
    model = AcousticModel(checkpoint)
    utterances = manifest.by_id()
    hypotheses: Dict[str, List[str]] = {}
    correct = frames = 0

    for utt_id in data.utt_ids:
        inputs, targets = data.examples[utt_id]
        log_post = model.forward(inputs)
        hypotheses[utt_id] = greedy_decode(log_post, symbols, options.silence_symbol)
        correct += int(np.sum(np.argmax(log_post, axis=1) == targets))
        frames += len(targets)

    references = {u: list(utterances[u].transcript) for u in data.utt_ids}
    speaker_of = {u: utterances[u].speaker_id for u in data.utt_ids}
    per_speaker = score_speakers(references, hypotheses, speaker_of, options.normalize)
    return EvaluationResult(hypotheses, per_speaker, correct / frames if frames else 0.0)


def score_sets(eval_sets: Mapping[str, Tuple[TrainingData, Manifest]], checkpoints: Mapping[str, Checkpoint],
               symbols: SymbolTable, options: Optional[ScoringOptions] = None) -> Dict[str, Dict[str, float]]:
    """Pooled WER of every checkpoint on every named evaluation set"""
    table: Dict[str, Dict[str, float]] = {}
    for set_name, (data, manifest) in eval_sets.items():
        table[set_name] = {}
        for setup, checkpoint in checkpoints.items():
            result = evaluate_checkpoint(checkpoint, data, manifest, symbols, options)
            table[set_name][setup] = weighted_average_wer((s.wer, s.word_count) for s in result.per_speaker)
    return table


def relative_improvements_sorted(baseline: Mapping[str, float],
                                 system: Mapping[str, float]) -> List[Tuple[str, float]]:
    """Per-speaker relative improvement of `system` over `baseline`, ascending"""
    rows = [(speaker, relative_improvement(baseline[speaker], system[speaker]))
            for speaker in sorted(baseline) if speaker in system]
    return sorted(rows, key=lambda row: (row[1], row[0]))


def ablation_table(per_setup: Mapping[str, Mapping[str, float]]) -> List[Dict[str, float]]:
    """
    Per-speaker change from removing one stage of the two-staged system.

    Removing augmentation compares two_staged with stage2_only, removing
    transfer compares it with stage1_only; a worse ablated system gives a
    negative value.
    """
    missing = [s for s in ("two_staged", "stage1_only", "stage2_only") if s not in per_setup]
    if missing:
        raise DataError(f"Ablation needs per-speaker WERs for {missing}")
    full = per_setup["two_staged"]
    rows = []
    for speaker in sorted(full):
        rows.append({
            "speaker_id": speaker,
            "removed_augmentation": relative_improvement(full[speaker], per_setup["stage2_only"][speaker]),
            "removed_transfer": relative_improvement(full[speaker], per_setup["stage1_only"][speaker]),
        })
    return rows


def read_word_file(path: Union[str, Path]) -> Dict[str, List[str]]:
    """JSON-lines {utt_id, words} records"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Word file not found: {path}")
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entries[str(record["utt_id"])] = list(record["words"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: expected {{utt_id, words}} ({exc})") from exc
    return entries


def write_word_file(entries: Mapping[str, Sequence[str]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt_id in sorted(entries):
            f.write(json.dumps({"utt_id": utt_id, "words": list(entries[utt_id])}) + "\n")
    return path


def write_report_csv(reports: Mapping[str, WerReport], path: Union[str, Path], config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["setup", "speaker_id", "wer", "word_count", "errors"])
        for setup in _ordered(reports):
            for score in reports[setup].per_speaker:
                writer.writerow([setup, score.speaker_id, f"{score.wer:.6f}", score.word_count, score.errors])
    return path


def write_report_json(reports: Mapping[str, WerReport], path: Union[str, Path], config_hash: str,
                      extra: Optional[Dict[str, object]] = None) -> Path:
    document: Dict[str, object] = {
        "config_hash": config_hash,
        "setups": {setup: {"aggregate_wer": reports[setup].aggregate,
                           "boxplot": asdict(reports[setup].boxplot),
                           "speakers": len(reports[setup].per_speaker)}
                   for setup in _ordered(reports)},
    }
    if extra:
        document.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_boxplot_dat(reports: Mapping[str, WerReport], path: Union[str, Path], config_hash: str) -> Path:
    """gnuplot candlestick rows: index setup min whisker_low q1 median q3 whisker_high max mean"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={config_hash}",
             "# index setup min whisker_low q1 median q3 whisker_high max mean"]
    for index, setup in enumerate(_ordered(reports), 1):
        b = reports[setup].boxplot
        values = (b.minimum, b.whisker_low, b.q1, b.median, b.q3, b.whisker_high, b.maximum, b.mean)
        lines.append(f"{index} {setup} " + " ".join(f"{v:.6f}" for v in values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _ordered(reports: Mapping[str, WerReport]) -> List[str]:
    known = [s for s in SETUPS if s in reports]
    return known + sorted(s for s in reports if s not in SETUPS)
