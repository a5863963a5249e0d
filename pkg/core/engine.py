"""
Experiment Engine

Coordinates the pipeline plugins for one experiment configuration:
augmentation, feature extraction, the shared Stage-1 models, per-fold
Stage-2 transfer and the leave-one-speaker-out report. Progress is
recorded in the experiment journal so an interrupted run resumes at the
first unfinished fold.
"""

import csv
import json
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .config import ExperimentConfig
from .errors import ConfigError
from .manifest import Alignments, Manifest, read_manifest, write_manifest
from .plugins.acoustic_model import Checkpoint, build_model, load_checkpoint, save_checkpoint
from .plugins.augment import build_multicondition, load_noise_pool, load_rir_database, speed_perturb_manifest
from .plugins.evaluation import (Fold, SpeakerScore, SymbolTable, WerReport, ablation_table, build_report,
                                 evaluate_checkpoint, loso_folds, relative_improvements_sorted, score_sets,
                                 write_boxplot_dat, write_report_csv, write_report_json)
from .plugins.features import FeatureExtractor, FeatureIndex, INDEX_FILE
from .plugins.trainer import SETUPS, TrainingData, run_two_staged, tag_setup, train_stage, transfer_init
from .state import ExperimentJournal

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

STAGE1_SETUPS = ("baseline", "stage1_only")
STAGE2_SOURCES = (("stage2_only", "baseline"), ("two_staged", "stage1_only"))
FOLD_RESULT = "result.json"


@dataclass
class LosoReport:
    """Everything the leave-one-speaker-out run reports"""

    reports: Dict[str, WerReport]
    frame_accuracy: Dict[str, float]
    improvements: List[Tuple[str, float]]
    ablation: List[Dict[str, Any]]
    folds: List[Dict[str, Any]] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


class ExperimentEngine:
    """Runs one experiment configuration inside its work directory"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.config_hash = config.config_hash()
        self.workdir = Path(config.paths.workdir)
        self.extractor = FeatureExtractor(config.features)
        self._journal: Optional[ExperimentJournal] = None

    @property
    def journal(self) -> ExperimentJournal:
        if self._journal is None:
            self._journal = ExperimentJournal(self.workdir, self.config_hash)
        return self._journal

    def open_workdir(self) -> ExperimentJournal:
        """Journal of the work directory; refuses one written under another config hash"""
        return self.journal

    def require_path(self, name: str) -> Path:
        value = getattr(self.config.paths, name)
        if not value:
            raise ConfigError(f"paths.{name} is required for this command")
        return Path(value)

    def load_corpus(self, which: str) -> Tuple[Manifest, Alignments]:
        """The clean source or the target corpus with its alignments"""
        manifest = read_manifest(self.require_path(f"{which}_manifest"))
        return manifest, Alignments.load(self.require_path(f"{which}_alignments"))

    def symbols(self) -> SymbolTable:
        return SymbolTable.load(self.require_path("symbol_table"))

    def augment(self, manifest: Manifest) -> Manifest:
        """Multi-condition copy of the clean corpus (cached in the work directory)"""
        self.open_workdir()
        out_dir = self.workdir / "augment"
        if (out_dir / "manifest.jsonl").exists() and (out_dir / "provenance.jsonl").exists():
            return read_manifest(out_dir / "manifest.jsonl")

        rooms = load_rir_database(self.require_path("rir_dir"), self.config.features.sample_rate_hz)
        if not rooms:
            raise ConfigError(f"No room impulse responses found in {self.config.paths.rir_dir}")
        pool = load_noise_pool(self.require_path("noise_dir"), self.config.features.sample_rate_hz)
        if len(pool) == 0:
            raise ConfigError(f"No noise recordings found in {self.config.paths.noise_dir}")

        return build_multicondition(manifest, rooms, pool, self.config.augmentation.seed, out_dir,
                                    spec=self.config.augmentation, jobs=self.config.jobs)

    def speed_perturb(self, manifest: Manifest, name: str) -> Manifest:
        factors = tuple(self.config.augmentation.speed_factors)
        if factors == (1.0,):
            return manifest
        self.open_workdir()
        out_dir = self.workdir / "speed" / name
        if (out_dir / "manifest.jsonl").exists():
            return read_manifest(out_dir / "manifest.jsonl")
        perturbed = speed_perturb_manifest(manifest, out_dir, factors, self.config.jobs)
        write_manifest(perturbed, out_dir / "manifest.jsonl")
        return perturbed

    def extract(self, manifest: Manifest, name: str) -> FeatureIndex:
        self.open_workdir()
        out_dir = self.workdir / "features" / name
        if (out_dir / INDEX_FILE).exists():
            return FeatureIndex.open(out_dir)
        return self.extractor.extract(manifest, out_dir, self.config.jobs)

    def training_data(self, manifest: Manifest, alignments: Alignments, name: str) -> TrainingData:
        return TrainingData.from_index(manifest, self.extract(manifest, name), alignments)

    def source_data(self) -> Tuple[TrainingData, TrainingData]:
        """Clean and multi-condition Stage-1 training sets, both speed perturbed"""
        clean, alignments = self.load_corpus("clean")
        multicondition = self.augment(clean)
        clean_sp = self.speed_perturb(clean, "clean")
        multi_sp = self.speed_perturb(multicondition, "multicondition")
        return (self.training_data(clean_sp, alignments, "clean"),
                self.training_data(multi_sp, alignments, "multicondition"))

    def _finish(self, checkpoint: Checkpoint, setup: str, path: Path) -> Checkpoint:
        tag_setup(checkpoint, setup)
        checkpoint.metadata["experiment_hash"] = self.config_hash
        save_checkpoint(checkpoint, path, self.config.checkpoint_dtype)
        return checkpoint

    def train_stage1(self) -> Dict[str, Checkpoint]:
        """baseline and stage1_only, trained once and shared by every fold"""
        done = self.journal.state.trained_stages()
        models: Dict[str, Checkpoint] = {}
        if all(s in done and Path(done[s]).exists() for s in STAGE1_SETUPS):
            for setup in STAGE1_SETUPS:
                models[setup] = load_checkpoint(done[setup])
            logger.info("Reusing Stage-1 models from %s", self.workdir / "stage1")
            return models

        clean, multicondition = self.source_data()
        init = build_model(self.config.model, self.config.seed)
        stage_dir = self.workdir / "stage1"
        for setup, data in zip(STAGE1_SETUPS, (clean, multicondition)):
            result = train_stage(init, data, self.config.stage1, stage_dir / f"{setup}.metrics.csv")
            path = stage_dir / f"{setup}.ckpt"
            models[setup] = self._finish(result.checkpoint, setup, path)
            self.journal.stage_trained(setup, path)
        return models

    def train_all(self) -> Dict[str, Checkpoint]:
        """All four setups with Stage 2 on the whole target corpus"""
        self.open_workdir()
        clean, multicondition = self.source_data()
        target_manifest, target_alignments = self.load_corpus("target")
        target = self.training_data(target_manifest, target_alignments, "target")
        out_dir = self.workdir / "models"
        models = run_two_staged(clean, multicondition, target, self.config.model, self.config.stage1,
                                self.config.stage2, seed=self.config.seed, metrics_dir=out_dir)
        for setup, checkpoint in models.items():
            self._finish(checkpoint, setup, out_dir / f"{setup}.ckpt")
        return models

    def run_fold(self, fold: Fold, stage1: Dict[str, Checkpoint], target: TrainingData,
                 manifest: Manifest, symbols: SymbolTable) -> Path:
        """Stage 2 on all other target speakers, then score all setups on the held-out one"""
        fold_dir = self.workdir / "folds" / fold.held_out
        fold_dir.mkdir(parents=True, exist_ok=True)
        path = fold_dir / FOLD_RESULT
        utterances = manifest.by_id()
        if not any(utterances[u].transcript for u in fold.eval_utt_ids):
            logger.warning("Fold %s: held-out speaker has no reference words, skipped", fold.held_out)
            return self._write_fold(path, {"config_hash": self.config_hash, "speaker_id": fold.held_out,
                                           "skipped": "no reference words"})

        train = target.subset(fold.train_utt_ids)
        held_out = target.subset(fold.eval_utt_ids)

        models = dict(stage1)
        for setup, source in STAGE2_SOURCES:
            start = transfer_init(stage1[source], self.config.model)
            result = train_stage(start, train, self.config.stage2, fold_dir / f"{setup}.metrics.csv")
            result.checkpoint.metadata["fold"] = fold.held_out
            models[setup] = self._finish(result.checkpoint, setup, fold_dir / f"{setup}.ckpt")

        setups = {}
        for setup in SETUPS:
            evaluation = evaluate_checkpoint(models[setup], held_out, manifest, symbols, self.config.scoring)
            score = evaluation.per_speaker[0]
            setups[setup] = {
                "wer": score.wer, "word_count": score.word_count, "errors": score.errors,
                "frame_accuracy": evaluation.frame_accuracy, "frames": held_out.num_frames,
                "hypotheses": evaluation.hypotheses,
            }

        self._write_fold(path, {"config_hash": self.config_hash, "speaker_id": fold.held_out, "setups": setups})
        logger.info("Fold %s: %s", fold.held_out,
                    ", ".join(f"{s} {setups[s]['wer']:.3f}" for s in SETUPS))
        return path

    def _write_fold(self, path: Path, document: Dict[str, Any]) -> Path:
        temp_file = path.with_suffix(".json.temp")
        temp_file.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        temp_file.replace(path)
        self.journal.fold_completed(document["speaker_id"], path)
        return path

    def run_loso(self) -> LosoReport:
        self.open_workdir()
        manifest, alignments = self.load_corpus("target")
        plan = loso_folds(manifest)
        symbols = self.symbols()
        stage1 = self.train_stage1()
        target = self.training_data(manifest, alignments, "target")

        completed = self.journal.state.completed_folds()
        pending = [f for f in plan if not (f.held_out in completed and Path(completed[f.held_out]).exists())]
        logger.info("%d folds, %d already complete", len(plan), len(plan) - len(pending))

        def run(fold: Fold) -> Path:
            return self.run_fold(fold, stage1, target, manifest, symbols)

        if self.config.jobs > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
                list(executor.map(run, pending))
        else:
            for fold in pending:
                run(fold)

        return self.assemble_report()

    def fold_results(self) -> List[Dict[str, Any]]:
        self.open_workdir()
        completed = self.journal.state.completed_folds()
        results = []
        for speaker in sorted(completed):
            document = json.loads(Path(completed[speaker]).read_text(encoding="utf-8"))
            if document.get("config_hash") != self.config_hash:
                raise ConfigError(f"Fold result {completed[speaker]} was produced by another config")
            results.append(document)
        return results

    def assemble_report(self) -> LosoReport:
        results = self.fold_results()
        folds = [f for f in results if "setups" in f]
        if not folds:
            raise ConfigError("No completed folds to report")
        reports, accuracy = OrderedDict(), {}
        for setup in SETUPS:
            scores = [SpeakerScore(f["speaker_id"], f["setups"][setup]["wer"],
                                   f["setups"][setup]["word_count"], f["setups"][setup]["errors"])
                      for f in folds]
            reports[setup] = build_report(setup, scores)
            frames = sum(f["setups"][setup]["frames"] for f in folds)
            correct = sum(f["setups"][setup]["frame_accuracy"] * f["setups"][setup]["frames"] for f in folds)
            accuracy[setup] = correct / frames if frames else 0.0

        per_setup = {setup: reports[setup].speaker_wers() for setup in SETUPS}
        improvable = {s: w for s, w in per_setup["baseline"].items() if w > 0}
        return LosoReport(
            reports=reports,
            frame_accuracy=accuracy,
            improvements=relative_improvements_sorted(improvable, per_setup["two_staged"]),
            ablation=ablation_table({s: {k: v for k, v in per_setup[s].items()
                                         if per_setup["two_staged"].get(k, 0) > 0} for s in SETUPS}),
            folds=folds,
            skipped=[f["speaker_id"] for f in results if "setups" not in f],
        )

    def write_report(self, report: LosoReport, out_dir: Optional[Path] = None) -> Dict[str, Path]:
        """per_speaker.csv, aggregate.json, boxplot.dat, improvements.csv and ablation.csv"""
        out_dir = Path(out_dir) if out_dir is not None else self.workdir / "report"
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "per_speaker": write_report_csv(report.reports, out_dir / "per_speaker.csv", self.config_hash),
            "aggregate": write_report_json(report.reports, out_dir / "aggregate.json", self.config_hash,
                                           extra={"frame_accuracy": report.frame_accuracy,
                                                  "folds": len(report.folds),
                                                  "skipped_speakers": report.skipped}),
            "boxplot": write_boxplot_dat(report.reports, out_dir / "boxplot.dat", self.config_hash),
            "improvements": self._write_rows(out_dir / "improvements.csv", ["speaker_id", "relative_improvement"],
                                             [list(row) for row in report.improvements]),
            "ablation": self._write_rows(out_dir / "ablation.csv",
                                         ["speaker_id", "removed_augmentation", "removed_transfer"],
                                         [[r["speaker_id"], r["removed_augmentation"], r["removed_transfer"]]
                                          for r in report.ablation]),
        }
        self.journal.report_written(out_dir)
        return paths

    def _write_rows(self, path: Path, header: List[str], rows: List[List[Any]]) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# config_hash={self.config_hash}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
        return path

    def score_eval_sets(self, checkpoints: Dict[str, Checkpoint]) -> Dict[str, Dict[str, float]]:
        """WER of each checkpoint on every configured evaluation set"""
        self.open_workdir()
        if not self.config.paths.eval_sets:
            raise ConfigError("paths.eval_sets is empty")
        sets = {}
        for name, manifest_path in sorted(self.config.paths.eval_sets.items()):
            manifest = read_manifest(manifest_path)
            alignment_file = Path(manifest_path).parent / "alignments.jsonl"
            alignments = Alignments.load(alignment_file)
            sets[name] = (self.training_data(manifest, alignments, f"eval-{name}"), manifest)
        return score_sets(sets, checkpoints, self.symbols(), self.config.scoring)


def run_loso(config: ExperimentConfig) -> LosoReport:
    """Full leave-one-speaker-out experiment, report files included"""
    engine = ExperimentEngine(config)
    report = engine.run_loso()
    engine.write_report(report)
    return report
