#!/usr/bin/env python3
"""
TwoStage CLI - Two-staged acoustic model adaptation experiments

Augment a clean corpus, train the multi-condition source model, transfer it
to the target domain and evaluate leave-one-speaker-out, all from one
reproducible, seeded experiment configuration.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

# Repository root on the path so `core` imports as a package
sys.path.insert(0, str(Path(__file__).parent))

from core.config import ExperimentConfig, Stage, config_schema, load_config
from core.corpus import corrupt_corpus, synth_corpus, synth_environment
from core.engine import ExperimentEngine
from core.errors import ConfigError, TwoStageError
from core.manifest import Alignments, read_manifest, write_manifest
from core.plugins.acoustic_model import build_model, load_checkpoint, save_checkpoint
from core.plugins.augment import (build_multicondition, load_noise_pool, load_rir_database,
                                  speed_perturb_manifest)
from core.plugins.evaluation import align_words, read_word_file, wer, weighted_average_wer
from core.plugins.features import FeatureExtractor
from core.plugins.trainer import SETUPS, TrainingData, train_stage, transfer_init


class TwoStageCLI:
    """Command implementations for the twostage entry point"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.engine = ExperimentEngine(config)

    def augment(self, manifest: Optional[str], out_dir: Optional[str], speed: bool) -> None:
        """Build the clean + reverb + reverb/noise training set"""
        paths = self.config.paths
        manifest = read_manifest(manifest or self.engine.require_path("clean_manifest"))
        if out_dir is None:
            self.engine.open_workdir()
        out_dir = Path(out_dir or self.engine.workdir / "augment")
        print(f"Augmenting {len(manifest)} utterances")

        rooms = load_rir_database(self.engine.require_path("rir_dir"), self.config.features.sample_rate_hz)
        pool = load_noise_pool(self.engine.require_path("noise_dir"), self.config.features.sample_rate_hz)
        result = build_multicondition(manifest, rooms, pool, self.config.augmentation.seed, out_dir,
                                      spec=self.config.augmentation, jobs=self.config.jobs)
        print(f"✅ Multi-condition set: {len(result)} utterances, "
              f"{result.total_duration() / 3600.0:.2f} h (rooms from {paths.rir_dir})")

        if speed:
            perturbed = speed_perturb_manifest(result, out_dir / "speed",
                                               self.config.augmentation.speed_factors, self.config.jobs)
            write_manifest(perturbed, out_dir / "speed" / "manifest.jsonl")
            print(f"✅ Speed perturbed: {len(perturbed)} utterances, "
                  f"{perturbed.total_duration() / 3600.0:.2f} h")
        print(f"📁 Location: {out_dir}/")

    def features(self, manifest: str, out_dir: str) -> None:
        """Extract network input features for a manifest"""
        index = FeatureExtractor(self.config.features).extract(read_manifest(manifest), out_dir, self.config.jobs)
        print(f"✅ Features for {len(index)} utterances")
        print(f"📁 Location: {out_dir}/")

    def train(self, stage: str, manifest: Optional[str], alignments: Optional[str],
              init: Optional[str], out: Optional[str]) -> None:
        """Train one stage, or all four setups with --stage all"""
        if stage == "all":
            self.engine.train_all()
            for setup in SETUPS:
                print(f"✅ {setup}: {self.engine.workdir / 'models' / (setup + '.ckpt')}")
            return

        if not (manifest and alignments and out):
            raise ConfigError("train --stage stage1|stage2 needs --manifest, --alignments and --out")
        stage_config = self.config.stage1 if stage == Stage.STAGE1.value else self.config.stage2
        start = load_checkpoint(init) if init else build_model(self.config.model, self.config.seed)

        corpus = read_manifest(manifest)
        out = Path(out)
        data = TrainingData.from_index(
            corpus,
            FeatureExtractor(self.config.features).extract(corpus, out.parent / f"{out.stem}.features",
                                                           self.config.jobs),
            Alignments.load(alignments),
        )
        result = train_stage(start, data, stage_config, out.with_suffix(".metrics.csv"))
        result.checkpoint.metadata["experiment_hash"] = self.config.config_hash()
        save_checkpoint(result.checkpoint, out, self.config.checkpoint_dtype)
        if result.epoch_losses:
            print(f"📊 Final epoch loss {result.epoch_losses[-1]:.4f}, "
                  f"frame accuracy {result.epoch_accuracies[-1]:.3f}")
        print(f"✅ {stage} checkpoint: {out}")

    def transfer(self, source: str, out: str) -> None:
        """Initialize a Stage-2 model with every weight of a source model"""
        target = transfer_init(load_checkpoint(source), self.config.model)
        save_checkpoint(target, out, self.config.checkpoint_dtype)
        print(f"✅ Transferred {len(target.params)} tensors to {out}")

    def loso(self) -> None:
        """Run the leave-one-speaker-out experiment"""
        report = self.engine.run_loso()
        paths = self.engine.write_report(report)
        self._print_summary(report)
        print(f"📁 Report: {paths['aggregate'].parent}/")

    def report(self, out_dir: Optional[str]) -> None:
        """Rebuild report files from completed folds"""
        report = self.engine.assemble_report()
        paths = self.engine.write_report(report, Path(out_dir) if out_dir else None)
        self._print_summary(report)
        print(f"📁 Report: {paths['aggregate'].parent}/")

    def score(self, ref: Optional[str], hyp: Optional[str], models_dir: Optional[str]) -> None:
        """Score a hypothesis file, or checkpoints on the configured evaluation sets"""
        if ref and hyp:
            references, hypotheses = read_word_file(ref), read_word_file(hyp)
            missing = sorted(set(references) - set(hypotheses))
            if missing:
                print(f"⚠️  {len(missing)} utterances have no hypothesis and score as deletions")
            pairs = []
            for utt_id in sorted(references):
                alignment = align_words(references[utt_id], hypotheses.get(utt_id, []),
                                        self.config.scoring.normalize)
                if alignment.ref_len:
                    pairs.append((wer(alignment), alignment.ref_len))
            print(f"📊 WER {100.0 * weighted_average_wer(pairs):.2f}% over {sum(n for _, n in pairs)} words")
            return

        if models_dir is None:
            self.engine.open_workdir()
        models_dir = Path(models_dir or self.engine.workdir / "models")
        checkpoints = {s: load_checkpoint(models_dir / f"{s}.ckpt") for s in SETUPS
                       if (models_dir / f"{s}.ckpt").exists()}
        if not checkpoints:
            raise ConfigError(f"No checkpoints found in {models_dir}")
        table = self.engine.score_eval_sets(checkpoints)
        print("📊 WER (%) by evaluation set")
        print(f"  {'set':<16}" + "".join(f"{s:>14}" for s in checkpoints))
        for name, row in table.items():
            print(f"  {name:<16}" + "".join(f"{100.0 * row[s]:>14.2f}" for s in checkpoints))

    def synth_corpus(self, out_dir: str, speakers: int, utts: int, phones: int,
                     target_speakers: int, target_utts: int) -> None:
        """Synthesize source/target corpora, rooms and noises plus a matching config"""
        out_dir = Path(out_dir)
        seed = self.config.seed
        source = synth_corpus(out_dir / "source", speakers, utts, phones, seed, speaker_prefix="src")
        rir_dir, noise_dir = synth_environment(out_dir / "environment", seed, key="train")
        heldout_rirs, heldout_noises = synth_environment(out_dir / "heldout", seed, key="heldout")

        target_clean = synth_corpus(out_dir / "target_clean", target_speakers, target_utts, phones, seed,
                                    speaker_prefix="tgt")
        target = corrupt_corpus(target_clean, load_rir_database(heldout_rirs), load_noise_pool(heldout_noises),
                                seed, out_dir / "target")

        paths = {
            "clean_manifest": str(source.manifest_path), "clean_alignments": str(source.alignment_path),
            "target_manifest": str(target.manifest_path), "target_alignments": str(target.alignment_path),
            "rir_dir": str(rir_dir), "noise_dir": str(noise_dir),
            "heldout_rir_dir": str(heldout_rirs), "heldout_noise_dir": str(heldout_noises),
            "symbol_table": str(source.symbol_path), "workdir": str(out_dir / "work"),
        }
        document = self.config.model_dump(mode="json")
        document["paths"] = paths
        document["model"]["num_outputs"] = phones
        config_path = out_dir / "experiment.json"
        config_path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")

        print(f"✅ Source corpus: {len(source.manifest)} utterances from {speakers} speakers")
        print(f"✅ Target corpus: {len(target.manifest)} utterances from {target_speakers} speakers "
              "(held-out rooms and noises)")
        print(f"📁 Config: {config_path}")
        print(f"\nNext step: twostage.py --config {config_path} loso")

    def schema(self, out: Optional[str]) -> None:
        """Write the experiment config JSON schema"""
        text = json.dumps(config_schema(), indent=2, sort_keys=True) + "\n"
        if out:
            Path(out).write_text(text, encoding="utf-8")
            print(f"✅ Schema written to {out}")
        else:
            print(text, end="")

    def _print_summary(self, report) -> None:
        print("\n📊 Leave-one-speaker-out results")
        for setup in SETUPS:
            r = report.reports[setup]
            print(f"  {setup:<12} WER {100.0 * r.aggregate:6.2f}%  median {100.0 * r.boxplot.median:6.2f}%  "
                  f"frame acc {report.frame_accuracy[setup]:.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="TwoStage CLI - two-staged acoustic model adaptation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  twostage.py synth-corpus --out demo --speakers 6 --target-speakers 4
  twostage.py --config demo/experiment.json loso
  twostage.py --config demo/experiment.json report
  twostage.py score --ref refs.jsonl --hyp hyps.jsonl
        """
    )
    parser.add_argument("--config", help="Experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="Global seed (overrides the config)")
    parser.add_argument("--jobs", type=int, help="Worker threads (overrides the config)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    augment_parser = subparsers.add_parser("augment", help="Build the multi-condition training set")
    augment_parser.add_argument("--manifest", help="Clean manifest (default: paths.clean_manifest)")
    augment_parser.add_argument("--out", help="Output directory (default: <workdir>/augment)")
    augment_parser.add_argument("--speed", action="store_true", help="Also apply speed perturbation")

    features_parser = subparsers.add_parser("features", help="Extract features for a manifest")
    features_parser.add_argument("--manifest", required=True)
    features_parser.add_argument("--out", required=True)

    train_parser = subparsers.add_parser("train", help="Train one stage or all four setups")
    train_parser.add_argument("--stage", choices=["stage1", "stage2", "all"], default="all")
    train_parser.add_argument("--manifest")
    train_parser.add_argument("--alignments")
    train_parser.add_argument("--init", help="Starting checkpoint (default: random init)")
    train_parser.add_argument("--out", help="Output checkpoint")

    transfer_parser = subparsers.add_parser("transfer", help="Initialize Stage 2 from a source model")
    transfer_parser.add_argument("--source", required=True)
    transfer_parser.add_argument("--out", required=True)

    subparsers.add_parser("loso", help="Run the leave-one-speaker-out experiment")

    score_parser = subparsers.add_parser("score", help="Compute word error rates")
    score_parser.add_argument("--ref", help="Reference JSONL (utt_id, words)")
    score_parser.add_argument("--hyp", help="Hypothesis JSONL (utt_id, words)")
    score_parser.add_argument("--models", help="Checkpoint directory for evaluation-set scoring")

    report_parser = subparsers.add_parser("report", help="Rebuild reports from completed folds")
    report_parser.add_argument("--out", help="Report directory (default: <workdir>/report)")

    synth_parser = subparsers.add_parser("synth-corpus", help="Synthesize a desk-scale experiment")
    synth_parser.add_argument("--out", required=True)
    synth_parser.add_argument("--speakers", type=int, default=8)
    synth_parser.add_argument("--utts", type=int, default=10)
    synth_parser.add_argument("--phones", type=int, default=12, help="Phone classes including silence")
    synth_parser.add_argument("--target-speakers", type=int, default=4)
    synth_parser.add_argument("--target-utts", type=int, default=8)

    schema_parser = subparsers.add_parser("schema", help="Print or write the config JSON schema")
    schema_parser.add_argument("--out")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config).with_overrides(seed=args.seed, jobs=args.jobs)
        cli = TwoStageCLI(config)

        if args.command == "augment":
            cli.augment(args.manifest, args.out, args.speed)
        elif args.command == "features":
            cli.features(args.manifest, args.out)
        elif args.command == "train":
            cli.train(args.stage, args.manifest, args.alignments, args.init, args.out)
        elif args.command == "transfer":
            cli.transfer(args.source, args.out)
        elif args.command == "loso":
            cli.loso()
        elif args.command == "score":
            cli.score(args.ref, args.hyp, args.models)
        elif args.command == "report":
            cli.report(args.out)
        elif args.command == "synth-corpus":
            cli.synth_corpus(args.out, args.speakers, args.utts, args.phones,
                             args.target_speakers, args.target_utts)
        elif args.command == "schema":
            cli.schema(args.out)

    except TwoStageError as e:
        print(f"❌ {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\nOperation cancelled.")
        return 1

    return 0


if __name__ == "__main__":
    sys.exit(main())
