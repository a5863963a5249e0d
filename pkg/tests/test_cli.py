"""
Tests for the twostage command line
"""
import json
from pathlib import Path

from core.config import ExperimentConfig, load_config
from core.plugins.acoustic_model import build_model, load_checkpoint, save_checkpoint
from core.plugins.evaluation import write_word_file
from core.state import ExperimentJournal
from twostage import main


class TestExitCodes:
    """Test error reporting through exit codes"""

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 0
        assert "twostage" in capsys.readouterr().out

    def test_invalid_config(self, temp_dir, capsys):
        (temp_dir / "bad.json").write_text(json.dumps({"stage1": {"learning_rate": 0.1}}))
        assert main(["--config", str(temp_dir / "bad.json"), "schema"]) == 2
        assert "❌" in capsys.readouterr().out

    def test_missing_config(self, temp_dir):
        assert main(["--config", str(temp_dir / "nope.json"), "schema"]) == 2

    def test_malformed_word_file(self, temp_dir):
        (temp_dir / "ref.jsonl").write_text('{"utt": "a"}\n')
        write_word_file({"a": ["w01"]}, temp_dir / "hyp.jsonl")
        assert main(["score", "--ref", str(temp_dir / "ref.jsonl"), "--hyp", str(temp_dir / "hyp.jsonl")]) == 3

    def test_loso_without_paths(self, temp_dir):
        config = ExperimentConfig().model_dump(mode="json")
        config["paths"]["workdir"] = str(temp_dir / "work")
        (temp_dir / "c.json").write_text(json.dumps(config))
        assert main(["--config", str(temp_dir / "c.json"), "loso"]) == 2

    def test_train_all_refuses_a_workdir_from_another_config(self, temp_dir, capsys):
        ExperimentJournal(temp_dir / "work", "0123456789abcdef")
        config = ExperimentConfig().model_dump(mode="json")
        config["paths"]["workdir"] = str(temp_dir / "work")
        (temp_dir / "c.json").write_text(json.dumps(config))

        assert main(["--config", str(temp_dir / "c.json"), "train", "--stage", "all"]) == 2
        assert "refusing to resume" in capsys.readouterr().out
        assert main(["--config", str(temp_dir / "c.json"), "score"]) == 2


class TestScore:
    """Test hypothesis file scoring"""

    def test_one_substitution(self, temp_dir, capsys):
        write_word_file({"a": ["w01", "w02", "w03", "w04"]}, temp_dir / "ref.jsonl")
        write_word_file({"a": ["w01", "w02", "w05", "w04"]}, temp_dir / "hyp.jsonl")
        assert main(["score", "--ref", str(temp_dir / "ref.jsonl"), "--hyp", str(temp_dir / "hyp.jsonl")]) == 0
        assert "WER 25.00% over 4 words" in capsys.readouterr().out

    def test_missing_hypothesis_counts_as_deletions(self, temp_dir, capsys):
        write_word_file({"a": ["w01", "w02", "w03", "w04"], "b": ["w01", "w02"]}, temp_dir / "ref.jsonl")
        write_word_file({"a": ["w01", "w02", "w03", "w04"]}, temp_dir / "hyp.jsonl")
        assert main(["score", "--ref", str(temp_dir / "ref.jsonl"), "--hyp", str(temp_dir / "hyp.jsonl")]) == 0
        out = capsys.readouterr().out
        assert "1 utterances have no hypothesis" in out
        assert "WER 33.33% over 6 words" in out


class TestCommands:
    """Test the file-producing commands"""

    def test_schema(self, temp_dir):
        assert main(["schema", "--out", str(temp_dir / "schema.json")]) == 0
        schema = json.loads((temp_dir / "schema.json").read_text())
        assert "stage2" in schema["properties"]

    def test_transfer(self, temp_dir):
        source = build_model(ExperimentConfig().model, seed=0)
        save_checkpoint(source, temp_dir / "source.ckpt")
        assert main(["transfer", "--source", str(temp_dir / "source.ckpt"),
                     "--out", str(temp_dir / "stage2.ckpt")]) == 0
        assert load_checkpoint(temp_dir / "stage2.ckpt").equals(load_checkpoint(temp_dir / "source.ckpt"))

    def test_synth_corpus_writes_a_loadable_experiment(self, temp_dir):
        out = temp_dir / "demo"
        assert main(["--seed", "3", "synth-corpus", "--out", str(out), "--speakers", "2", "--utts", "1",
                     "--phones", "4", "--target-speakers", "2", "--target-utts", "1"]) == 0

        config = load_config(out / "experiment.json")
        assert config.seed == 3
        assert config.model.num_outputs == 4
        for name in ("clean_manifest", "target_manifest", "rir_dir", "noise_dir", "symbol_table"):
            assert Path(getattr(config.paths, name)).exists()
