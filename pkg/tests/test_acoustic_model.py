"""
Tests for the TDNN-LSTMP acoustic model, its gradients and checkpoints
"""
import numpy as np
import pytest

from core.config import DropoutSchedule, ModelConfig, STAGE1_DROPOUT, lstmp, tdnn
from core.errors import DataError, DomainError, NumericError
from core.plugins.acoustic_model import (AcousticModel, Checkpoint, LstmpLayer, build_model, dropout_rate,
                                         expected_shapes, forward, frame_accuracy, has_recurrence,
                                         load_checkpoint, receptive_field, save_checkpoint)


def _loss(model, inputs, targets, rate=0.0, seed=None):
    rng = np.random.default_rng(seed) if seed is not None else None
    log_post = model.forward(inputs, rate, rng, mode="train" if rate > 0 else "eval")
    return -np.mean(log_post[np.arange(len(targets)), targets])


def _gradient_check(checkpoint, inputs, targets, sampled=True, rate=0.0, seed=None, h=1e-5):
    """Compare analytic gradients with central differences; returns the number of entries checked"""
    model = AcousticModel(checkpoint)
    rng = np.random.default_rng(seed) if seed is not None else None
    grads, _ = model.backward(inputs, targets, rate, rng)
    pick = np.random.default_rng(0)
    checked = 0

    for name, param in checkpoint.params.items():
        flat = grads[name].reshape(-1)
        if sampled:
            top = np.argsort(-np.abs(flat))[:3]
            extra = pick.choice(flat.size, size=min(2, flat.size), replace=False)
            entries = np.unique(np.concatenate([top, extra]))
        else:
            entries = np.arange(flat.size)

        for k in entries:
            pos = np.unravel_index(int(k), param.shape)
            original = param[pos]
            param[pos] = original + h
            up = _loss(model, inputs, targets, rate, seed)
            param[pos] = original - h
            down = _loss(model, inputs, targets, rate, seed)
            param[pos] = original

            numeric = (up - down) / (2 * h)
            analytic = flat[k]
            relative = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            assert relative < 1e-4, f"{name}{pos}: analytic {analytic:.6e}, numeric {numeric:.6e}"
            checked += 1
    return checked


class TestModelConstruction:
    """Test parameter layout and initialization"""

    def test_default_shapes_at_one_sixteenth(self):
        shapes = expected_shapes(ModelConfig())

        assert shapes["layer01.tdnn.weight"] == (64, 300 * 5)
        assert shapes["layer02.tdnn.weight"] == (64, 64 * 3)
        assert shapes["layer04.lstmp.W_x"] == (256, 64)
        assert shapes["layer04.lstmp.W_r"] == (256, 16)
        assert shapes["layer04.lstmp.W_rm"] == (16, 64)
        assert shapes["layer05.tdnn.weight"] == (64, 16 * 3)
        assert shapes["output.affine.weight"] == (40, 16)
        assert list(shapes)[-1] == "output.affine.bias"

    def test_same_seed_same_weights(self, tiny_model):
        assert build_model(tiny_model, 3).equals(build_model(tiny_model, 3))
        assert not build_model(tiny_model, 3).equals(build_model(tiny_model, 4))

    def test_biases_start_at_zero(self, tiny_model):
        checkpoint = build_model(tiny_model, 0)
        assert np.all(checkpoint.params["layer01.tdnn.bias"] == 0.0)
        assert np.all(checkpoint.params["layer02.lstmp.b"] == 0.0)
        assert checkpoint.metadata["stage"] == "init"

    def test_layer_names_in_network_order(self, tiny_model):
        names = build_model(tiny_model, 0).layer_names()
        assert names == ["layer01.tdnn", "layer02.lstmp", "layer03.tdnn", "output.affine"]


class TestContext:
    """Test receptive field and dropout schedule helpers"""

    def test_default_receptive_field(self):
        assert receptive_field(ModelConfig()) == (16, 16)
        assert has_recurrence(ModelConfig())

    def test_tdnn_only_model_has_no_recurrence(self):
        config = ModelConfig(layers=[tdnn([-2, 0, 1], 8)], input_dim=4, num_outputs=3)
        assert receptive_field(config) == (2, 1)
        assert not has_recurrence(config)

    @pytest.mark.parametrize("progress,expected", [(0.0, 0.0), (0.2, 0.0), (0.35, 0.15), (0.5, 0.3), (1.0, 0.0)])
    def test_stage1_dropout_schedule(self, progress, expected):
        schedule = DropoutSchedule(breakpoints=STAGE1_DROPOUT)
        assert dropout_rate(schedule, progress) == pytest.approx(expected)

    def test_dropout_progress_out_of_range(self):
        with pytest.raises(DomainError):
            dropout_rate(DropoutSchedule(), 1.5)


class TestForward:
    """Test the forward pass"""

    def test_log_posteriors_normalize(self, rng):
        model = AcousticModel(build_model(ModelConfig(), 0))
        log_post = model.forward(rng.standard_normal((10, 300)))

        assert log_post.shape == (10, 40)
        np.testing.assert_allclose(np.exp(log_post).sum(axis=1), 1.0, atol=1e-12)

    def test_eval_mode_is_deterministic(self, rng, tiny_model):
        checkpoint = build_model(tiny_model, 1)
        inputs = rng.standard_normal((7, 6))
        np.testing.assert_array_equal(forward(checkpoint, inputs), forward(checkpoint, inputs))

    def test_zero_dropout_train_equals_eval(self, rng, tiny_model):
        model = AcousticModel(build_model(tiny_model, 1))
        inputs = rng.standard_normal((7, 6))
        np.testing.assert_array_equal(model.forward(inputs, 0.0, None, mode="train"), model.forward(inputs))

    def test_dropout_is_reproducible_per_generator(self, rng, tiny_model):
        model = AcousticModel(build_model(tiny_model, 1))
        inputs = rng.standard_normal((20, 6))
        first = model.forward(inputs, 0.3, np.random.default_rng(9), mode="train")
        second = model.forward(inputs, 0.3, np.random.default_rng(9), mode="train")

        np.testing.assert_array_equal(first, second)
        assert not np.array_equal(first, model.forward(inputs))

    def test_dropout_removes_whole_frames(self, rng):
        """With one mask per frame, a dropped frame carries only the output bias"""
        config = ModelConfig(layers=[tdnn([0], 16)], input_dim=5, num_outputs=4, scale_factor=1.0)
        model = AcousticModel(build_model(config, 2))
        log_post = model.forward(rng.standard_normal((50, 5)), 0.5, np.random.default_rng(4), mode="train")

        uniform = np.all(np.abs(log_post + np.log(4.0)) < 1e-12, axis=1)
        assert 0 < uniform.sum() < 50

    def test_train_dropout_needs_generator(self, tiny_model):
        model = AcousticModel(build_model(tiny_model, 1))
        with pytest.raises(DomainError, match="generator"):
            model.forward(np.zeros((3, 6)), 0.3, None, mode="train")

    def test_wrong_input_dim(self, tiny_model):
        with pytest.raises(DomainError, match="inputs"):
            forward(build_model(tiny_model, 0), np.zeros((4, 7)))

    def test_zero_frames(self, tiny_model):
        with pytest.raises(DomainError, match="zero frames"):
            forward(build_model(tiny_model, 0), np.zeros((0, 6)))

    def test_unknown_mode(self, tiny_model):
        with pytest.raises(DomainError, match="mode"):
            forward(build_model(tiny_model, 0), np.zeros((4, 6)), mode="infer")

    def test_nan_weight_reports_the_layer(self, rng):
        checkpoint = build_model(ModelConfig(), 0)
        checkpoint.params["layer03.tdnn.weight"][0, 0] = np.nan

        with pytest.raises(NumericError) as excinfo:
            forward(checkpoint, rng.standard_normal((6, 300)))
        assert excinfo.value.layer_index == 3

    def test_non_finite_input_is_layer_zero(self, tiny_model):
        inputs = np.zeros((4, 6))
        inputs[1, 2] = np.inf
        with pytest.raises(NumericError) as excinfo:
            forward(build_model(tiny_model, 0), inputs)
        assert excinfo.value.layer_index == 0

    def test_tdnn_stack_is_time_shift_equivariant(self, rng):
        """Away from the edges, shifting the input shifts the output"""
        config = ModelConfig(layers=[tdnn([-2, -1, 0, 1, 2], 8), tdnn([-1, 0, 1], 8), tdnn([-3, 0, 3], 8)],
                             input_dim=5, num_outputs=4, scale_factor=1.0)
        checkpoint = build_model(config, 5)
        left, right = receptive_field(config)
        inputs = rng.standard_normal((40, 5))
        shift = 5

        full = forward(checkpoint, inputs)
        shifted = forward(checkpoint, inputs[shift:])
        frames = np.arange(left, len(inputs) - shift - right)
        np.testing.assert_allclose(shifted[frames], full[frames + shift], rtol=1e-12, atol=1e-12)

    def test_saturated_gates_hold_the_cell(self, rng):
        """Forget gate pinned open and input gate shut keep the cell (and output) at zero"""
        spec = lstmp(cell_dim=4, proj_dim=2)
        cell = 4
        tensors = {
            "W_x": rng.standard_normal((4 * cell, 3)), "W_r": rng.standard_normal((4 * cell, 2)),
            "b": np.zeros(4 * cell), "w_ic": np.zeros(cell), "w_fc": np.zeros(cell),
            "w_oc": np.zeros(cell), "W_rm": rng.standard_normal((2, cell)),
        }
        tensors["b"][:cell] = -60.0
        tensors["b"][cell:2 * cell] = 60.0
        layer = LstmpLayer(spec, tensors)
        out, cache = layer.forward(rng.standard_normal((12, 3)) * 0.1)

        np.testing.assert_allclose(cache["c"], 0.0, atol=1e-20)
        np.testing.assert_allclose(out, 0.0, atol=1e-20)


class TestGradients:
    """Test backpropagation against finite differences"""

    def test_tiny_model_every_entry(self, rng, tiny_model):
        checkpoint = build_model(tiny_model, 3)
        inputs = rng.standard_normal((6, 6))
        targets = np.array([0, 1, 2, 2, 1, 0])

        checked = _gradient_check(checkpoint, inputs, targets, sampled=False)
        assert checked == sum(p.size for p in checkpoint.params.values())

    def test_tiny_model_with_dropout_masks(self, rng, tiny_model):
        """Gradients agree when both passes draw the same frame masks"""
        checkpoint = build_model(tiny_model, 4)
        inputs = rng.standard_normal((8, 6))
        targets = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        _gradient_check(checkpoint, inputs, targets, sampled=False, rate=0.3, seed=21)

    def test_default_model_sampled_entries(self, rng):
        """Top-3 and two random entries of every tensor of the one-sixteenth model"""
        checkpoint = build_model(ModelConfig(), 0)
        inputs = rng.standard_normal((6, 300)) * 0.5
        targets = rng.integers(0, 40, size=6)

        checked = _gradient_check(checkpoint, inputs, targets)
        assert checked >= 3 * len(checkpoint.params)

    def test_loss_is_mean_cross_entropy(self, rng, tiny_model):
        model = AcousticModel(build_model(tiny_model, 0))
        inputs = rng.standard_normal((5, 6))
        targets = np.array([0, 1, 2, 1, 0])
        _, loss = model.backward(inputs, targets)
        assert loss == pytest.approx(_loss(model, inputs, targets), rel=1e-12)

    def test_target_count_mismatch(self, tiny_model):
        with pytest.raises(DomainError, match="one target per frame"):
            AcousticModel(build_model(tiny_model, 0)).backward(np.zeros((4, 6)), np.zeros(3, dtype=int))

    def test_target_out_of_range(self, tiny_model):
        with pytest.raises(DomainError, match="Target ids"):
            AcousticModel(build_model(tiny_model, 0)).backward(np.zeros((2, 6)), np.array([0, 3]))

    def test_frame_accuracy(self):
        log_post = np.log(np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]))
        assert frame_accuracy(log_post, np.array([0, 1, 1])) == pytest.approx(2.0 / 3.0)


class TestCheckpoints:
    """Test the binary checkpoint format"""

    def test_float64_round_trip_is_bitwise(self, temp_dir, tiny_model):
        checkpoint = build_model(tiny_model, 8)
        checkpoint.metadata.update({"stage": "stage1", "setup": "baseline"})
        loaded = load_checkpoint(save_checkpoint(checkpoint, temp_dir / "m.ckpt", dtype="float64"))

        assert loaded.equals(checkpoint)
        assert loaded.metadata == checkpoint.metadata
        assert loaded.config_hash == checkpoint.config_hash

    def test_default_wire_format_is_little_endian_float32(self, temp_dir, tiny_model):
        checkpoint = build_model(tiny_model, 8)
        path = save_checkpoint(checkpoint, temp_dir / "m32.ckpt")
        assert b'"dtype": "<f4"' in path.read_bytes()
        assert b'"dtype": "<f8"' not in path.read_bytes()

        loaded = load_checkpoint(path)
        for name, value in checkpoint.params.items():
            np.testing.assert_array_equal(loaded.params[name], value.astype(np.float32).astype(np.float64))

    def test_missing_file(self, temp_dir):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(temp_dir / "nope.ckpt")

    def test_bad_magic(self, temp_dir):
        (temp_dir / "bad.ckpt").write_bytes(b"GARBAGE!" + b"\x00" * 16)
        with pytest.raises(DataError, match="Not a checkpoint"):
            load_checkpoint(temp_dir / "bad.ckpt")

    def test_tensors_must_match_config(self, temp_dir, tiny_model):
        other = tiny_model.model_copy(update={"num_outputs": 5})
        mismatched = Checkpoint(config=tiny_model, params=build_model(other, 0).params)
        save_checkpoint(mismatched, temp_dir / "mismatch.ckpt")
        with pytest.raises(DataError, match="do not match"):
            load_checkpoint(temp_dir / "mismatch.ckpt")

    def test_copy_is_independent(self, tiny_model):
        checkpoint = build_model(tiny_model, 0)
        duplicate = checkpoint.copy()
        duplicate.params["output.affine.bias"][0] = 1.0
        assert not duplicate.equals(checkpoint)
