"""
Tests for SGD training, learning-rate schedules, weight transfer and the
four comparison setups
"""
import csv

import numpy as np
import pytest

from core.config import DropoutSchedule, ModelConfig, StageConfig, lstmp, tdnn
from core.errors import DomainError, TrainingDivergedError, TransferError
from core.manifest import Alignments, Manifest, Utterance
from core.plugins.acoustic_model import build_model
from core.plugins.features import FeatureIndex, write_feature_archive
from core.plugins.trainer import (SETUP_STAGES, SETUPS, TrainingData, lr_at, run_two_staged, tag_setup, train_stage,
                                  transfer_init, write_metrics)


def _separable(num_utts=8, frames=20, dim=6, classes=3, seed=0, condition="clean", prefix="utt"):
    """Frames drawn around one well-separated centre per class"""
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(99).standard_normal((classes, dim)) * 2.0
    examples = {}
    for u in range(num_utts):
        targets = rng.integers(0, classes, frames)
        examples[f"{prefix}{u:02d}"] = (centers[targets] + 0.1 * rng.standard_normal((frames, dim)), targets)
    return TrainingData(examples, [condition])


def _recurrent_model():
    return ModelConfig(input_dim=6, layers=[tdnn([-1, 0, 1], 8), lstmp(cell_dim=6, proj_dim=4), tdnn([0], 8)],
                       num_outputs=3, scale_factor=1.0)


def _feedforward_model():
    return ModelConfig(input_dim=6, layers=[tdnn([0], 16)], num_outputs=3, scale_factor=1.0)


class TestLearningRate:
    """Test the geometric learning-rate schedule"""

    def test_stage1_endpoints(self):
        config = StageConfig.stage1()
        assert lr_at(config, 0.0) == pytest.approx(1e-3)
        assert lr_at(config, 1.0) == pytest.approx(1e-4)
        assert lr_at(config, 0.5) == pytest.approx(3.1623e-4, rel=1e-4)

    def test_stage2_endpoints(self):
        config = StageConfig.stage2()
        assert lr_at(config, 0.0) == pytest.approx(1e-6)
        assert lr_at(config, 1.0) == pytest.approx(1e-7)

    def test_strictly_decreasing(self):
        config = StageConfig.stage1()
        rates = [lr_at(config, p) for p in np.linspace(0.0, 1.0, 11)]
        assert all(b < a for a, b in zip(rates, rates[1:]))

    def test_progress_out_of_range(self):
        with pytest.raises(DomainError):
            lr_at(StageConfig.stage1(), -0.1)


class TestTrainStage:
    """Test one training stage"""

    def test_zero_epochs_returns_the_initial_model(self):
        init = build_model(_feedforward_model(), 0)
        result = train_stage(init, _separable(), StageConfig.stage1(epochs=0))

        assert result.checkpoint.equals(init)
        assert result.steps == []

    def test_loss_decreases_on_separable_data(self):
        config = StageConfig.stage1(lr_init=0.005, lr_final=0.002, epochs=4, batch_utts=2, dropout=DropoutSchedule())
        result = train_stage(build_model(_feedforward_model(), 1), _separable(), config)

        losses = result.epoch_losses
        assert len(losses) == 4
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_one_record_per_step(self, temp_dir):
        """epochs * ceil(N / batch) steps, first at lr_init and last at lr_final"""
        config = StageConfig.stage1(epochs=2, batch_utts=3)
        result = train_stage(build_model(_feedforward_model(), 1), _separable(num_utts=8), config,
                             metrics_path=temp_dir / "metrics.csv")

        assert len(result.steps) == 2 * 3
        assert result.steps[0]["lr"] == pytest.approx(1e-3)
        assert result.steps[-1]["lr"] == pytest.approx(1e-4)
        assert result.steps[-1]["progress"] == 1.0

        lines = (temp_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == f"# config_hash={result.checkpoint.config_hash}"
        rows = list(csv.DictReader(lines[1:]))
        assert len(rows) == 6
        assert list(rows[0]) == ["step", "epoch", "progress", "lr", "dropout", "loss", "frame_acc"]

    def test_stage2_never_drops_out(self):
        result = train_stage(build_model(_recurrent_model(), 1), _separable(), StageConfig.stage2(epochs=2))
        assert [s["dropout"] for s in result.steps] == [0.0] * len(result.steps)

    def test_stage1_dropout_follows_the_schedule(self):
        config = StageConfig.stage1(epochs=5, batch_utts=1)
        result = train_stage(build_model(_feedforward_model(), 1), _separable(num_utts=3), config)
        rates = [s["dropout"] for s in result.steps]

        assert rates[0] == 0.0 and rates[-1] == 0.0
        assert max(rates) == pytest.approx(0.3, abs=0.03)

    def test_equal_seeds_give_identical_checkpoints(self):
        config = StageConfig.stage1(epochs=2, batch_utts=3)
        init = build_model(_recurrent_model(), 2)
        first = train_stage(init, _separable(), config).checkpoint
        second = train_stage(init, _separable(), config).checkpoint

        assert first.equals(second)
        assert not first.equals(train_stage(init, _separable(), config.model_copy(update={"seed": 1})).checkpoint)

    def test_metadata(self):
        config = StageConfig.stage1(epochs=1)
        checkpoint = train_stage(build_model(_feedforward_model(), 0), _separable(condition="reverb"),
                                 config).checkpoint
        assert checkpoint.metadata["stage"] == "stage1"
        assert checkpoint.metadata["epoch"] == 1
        assert checkpoint.metadata["conditions"] == ["reverb"]

    def test_input_dim_mismatch(self):
        with pytest.raises(DomainError, match="Feature dim"):
            train_stage(build_model(_feedforward_model(), 0), _separable(dim=5), StageConfig.stage1())

    def test_target_ids_out_of_range(self):
        with pytest.raises(DomainError, match="target ids"):
            train_stage(build_model(_feedforward_model(), 0), _separable(classes=4), StageConfig.stage1())

    def test_nan_keeps_the_last_good_checkpoint(self):
        init = build_model(_feedforward_model(), 0)
        init.params["output.affine.bias"][0] = np.nan

        with pytest.raises(TrainingDivergedError) as excinfo:
            train_stage(init, _separable(), StageConfig.stage1(epochs=1))
        assert excinfo.value.step == 0
        assert excinfo.value.last_good is not None

    def test_write_metrics_header_only(self, temp_dir):
        path = write_metrics([], temp_dir / "empty.csv", "abc")
        assert path.read_text().splitlines() == ["# config_hash=abc",
                                                 "step,epoch,progress,lr,dropout,loss,frame_acc"]


class TestTrainingData:
    """Test assembling (features, targets) pairs"""

    def test_from_index_stretches_alignments(self, temp_dir, rng):
        write_feature_archive(rng.standard_normal((11, 4)), temp_dir / "u1-reverb-sp0.9.feats")
        write_feature_archive(rng.standard_normal((10, 4)), temp_dir / "u1.feats")
        index = FeatureIndex(temp_dir, [{"utt_id": "u1-reverb-sp0.9", "path": "u1-reverb-sp0.9.feats"},
                                        {"utt_id": "u1", "path": "u1.feats"}])
        manifest = Manifest([Utterance("u1", "s", "a.wav", "x"),
                             Utterance("u1-reverb-sp0.9", "s", "b.wav", "x", condition_tag="reverb")])
        alignments = Alignments({"u1": [0, 0, 1, 1, 1, 2, 2, 2, 0, 0]})
        data = TrainingData.from_index(manifest, index, alignments)

        assert data.utt_ids == ["u1", "u1-reverb-sp0.9"]
        assert data.num_frames == 21
        assert data.conditions == ["clean", "reverb"]
        assert len(data.examples["u1-reverb-sp0.9"][1]) == 11

    def test_mismatched_targets(self):
        with pytest.raises(DomainError):
            TrainingData({"u": (np.zeros((4, 2)), np.zeros(3, dtype=int))})


class TestTransfer:
    """Test Stage-2 initialization from a source model"""

    def test_every_tensor_is_copied_bitwise(self):
        source = build_model(_recurrent_model(), 5)
        source.metadata.update({"stage": "stage1", "setup": "stage1_only"})
        target = transfer_init(source, _recurrent_model())

        assert target.equals(source)
        assert target.metadata["stage"] == "stage2-init"
        assert target.metadata["source_setup"] == "stage1_only"

    def test_output_size_mismatch_names_the_output_layer(self):
        source = build_model(_recurrent_model(), 5)
        target_config = _recurrent_model().model_copy(update={"num_outputs": 4})

        with pytest.raises(TransferError, match="output.affine") as excinfo:
            transfer_init(source, target_config)
        assert {m["tensor"] for m in excinfo.value.mismatches} == {"output.affine.weight", "output.affine.bias"}

    def test_same_shapes_different_layers(self):
        source = build_model(_feedforward_model(), 5)
        target_config = ModelConfig(input_dim=6, layers=[tdnn([1], 16)], num_outputs=3, scale_factor=1.0)

        with pytest.raises(TransferError, match="layer01"):
            transfer_init(source, target_config)

    def test_one_stage2_step_updates_every_layer(self):
        source = build_model(_recurrent_model(), 5)
        start = transfer_init(source, _recurrent_model())
        data = _separable(num_utts=4)
        result = train_stage(start, data, StageConfig.stage2(epochs=1, batch_utts=4))

        assert len(result.steps) == 1
        for name, value in result.checkpoint.params.items():
            assert not np.array_equal(value, source.params[name]), name


class TestRunTwoStaged:
    """Test the four comparison setups"""

    def _run(self, temp_dir=None, stage2_epochs=1):
        clean = _separable(num_utts=4, condition="clean")
        multi = TrainingData({**clean.examples, **_separable(num_utts=4, seed=1, prefix="rev").examples},
                             ["clean", "reverb"])
        target = _separable(num_utts=3, seed=2, prefix="tgt", condition="target")
        return run_two_staged(clean, multi, target, _recurrent_model(), StageConfig.stage1(epochs=1),
                              StageConfig.stage2(epochs=stage2_epochs), seed=3, metrics_dir=temp_dir)

    def test_setups_and_tags(self, temp_dir):
        models = self._run(temp_dir)

        assert list(models) == list(SETUPS)
        assert [models[s].metadata["setup"] for s in SETUPS] == list(SETUPS)
        stages = [models[s].metadata["stage"] for s in SETUPS]
        assert stages == [SETUP_STAGES[s] for s in SETUPS]
        assert len(set(stages)) == 4
        assert [models[s].metadata["recipe"] for s in SETUPS] == ["stage1", "stage1", "stage2", "stage2"]
        assert models["baseline"].metadata["conditions"] == ["clean"]
        assert models["stage1_only"].metadata["conditions"] == ["clean", "reverb"]
        assert models["two_staged"].metadata["source_setup"] == "stage1_only"
        assert models["stage2_only"].metadata["source_setup"] == "baseline"
        assert len(list(temp_dir.glob("*.metrics.csv"))) == 4

    def test_zero_stage2_epochs_keeps_the_transferred_weights(self):
        models = self._run(stage2_epochs=0)
        assert models["stage2_only"].equals(models["baseline"])
        assert models["two_staged"].equals(models["stage1_only"])
        assert not models["baseline"].equals(models["stage1_only"])

    def test_retagging_keeps_the_training_recipe(self):
        checkpoint = build_model(_recurrent_model(), seed=0)
        checkpoint.metadata["stage"] = "stage2"
        tag_setup(checkpoint, "two_staged")
        tag_setup(checkpoint, "two_staged")
        assert checkpoint.metadata["stage"] == "stage2-from-multicondition"
        assert checkpoint.metadata["recipe"] == "stage2"

    def test_unknown_setup(self):
        with pytest.raises(DomainError, match="Unknown setup"):
            tag_setup(build_model(_recurrent_model(), seed=0), "stage3")
