"""
Trainer Plugin

Plain SGD over utterance minibatches with the learning rate and dropout
rate evaluated at global training progress, plus the weight transfer that
turns a Stage-1 source model into a Stage-2 starting point.
"""

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from ..config import ModelConfig, StageConfig, hash_document
from ..errors import DomainError, NumericError, TrainingDivergedError, TransferError
from ..manifest import Alignments, Manifest
from ..seeding import derive_rng
from .acoustic_model import AcousticModel, Checkpoint, build_model, dropout_rate, expected_shapes
from .features import FeatureIndex

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

SETUPS = ("baseline", "stage1_only", "stage2_only", "two_staged")
SETUP_STAGES = {
    "baseline": "stage1-clean",
    "stage1_only": "stage1-multicondition",
    "stage2_only": "stage2-from-clean",
    "two_staged": "stage2-from-multicondition",
}
METRIC_COLUMNS = ("step", "epoch", "progress", "lr", "dropout", "loss", "frame_acc")


class TrainingData:
    """In-memory (inputs, targets) pairs ordered by utterance id"""

    def __init__(self, examples: Dict[str, Tuple[np.ndarray, np.ndarray]],
                 conditions: Iterable[str] = ()):
        self.utt_ids = sorted(examples)
        self.examples = {k: (np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64))
                         for k, (x, y) in examples.items()}
        self.conditions = sorted(set(conditions))
        for utt_id, (x, y) in self.examples.items():
            if x.ndim != 2 or len(y) != x.shape[0]:
                raise DomainError(f"Utterance {utt_id}: {len(y)} targets for features of shape {x.shape}")

    def __len__(self) -> int:
        return len(self.utt_ids)

    @property
    def num_frames(self) -> int:
        return sum(len(y) for _, y in self.examples.values())

    @property
    def input_dim(self) -> int:
        return self.examples[self.utt_ids[0]][0].shape[1] if self.utt_ids else 0

    def subset(self, utt_ids: Iterable[str]) -> "TrainingData":
        return TrainingData({k: self.examples[k] for k in utt_ids}, self.conditions)

    @classmethod
    def from_index(cls, manifest: Manifest, index: FeatureIndex, alignments: Alignments) -> "TrainingData":
        """Pair every manifest utterance's features with its stretched alignment"""
        examples = {}
        for utt in manifest:
            features = index.load(utt.utt_id)
            examples[utt.utt_id] = (features, alignments.for_utterance(utt.utt_id, features.shape[0]))
        return cls(examples, (u.condition_tag for u in manifest))


@dataclass
class TrainingResult:
    """Final checkpoint plus per-step and per-epoch metrics"""

    checkpoint: Checkpoint
    steps: List[Dict[str, float]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracies: List[float] = field(default_factory=list)


def lr_at(config: StageConfig, progress: float) -> float:
    """Geometric interpolation between lr_init and lr_final"""
    if not 0.0 <= progress <= 1.0:
        raise DomainError(f"Training progress must lie in [0, 1], got {progress}")
    return float(config.lr_init * (config.lr_final / config.lr_init) ** progress)


def write_metrics(steps: List[Dict[str, float]], path: Union[str, Path], config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in steps:
            writer.writerow({k: record[k] for k in METRIC_COLUMNS})
    return path


def _apply_update(params: "OrderedDict[str, np.ndarray]", grads: Dict[str, np.ndarray],
                  lr: float, max_change: Optional[float]) -> float:
    """In-place SGD step; returns the (possibly capped) update norm"""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) * lr
    scale = lr
    if max_change is not None and norm > max_change:
        scale = lr * max_change / norm
        norm = max_change
    for name, grad in grads.items():
        params[name] -= scale * grad
    return norm


def train_stage(init: Checkpoint, data: TrainingData, config: StageConfig,
                metrics_path: Optional[Union[str, Path]] = None) -> TrainingResult:
    """
    Train `init` on `data` for config.epochs epochs of config.batch_utts
    utterances per minibatch.

    Gradients are summed over all frames of a minibatch. Batch order per
    epoch and dropout masks per step come from generators derived from
    config.seed, so two runs with equal seeds and data give identical
    checkpoints.
    """
    if len(data) and data.input_dim != init.config.input_dim:
        raise DomainError(f"Feature dim {data.input_dim} does not match model input {init.config.input_dim}")
    for utt_id in data.utt_ids:
        targets = data.examples[utt_id][1]
        if len(targets) and (targets.min() < 0 or targets.max() >= init.config.num_outputs):
            raise DomainError(f"Utterance {utt_id} has target ids outside [0, {init.config.num_outputs})")

    checkpoint = init.copy()
    if config.epochs == 0 or len(data) == 0:
        return TrainingResult(checkpoint=checkpoint)

    model = AcousticModel(checkpoint)
    batches_per_epoch = math.ceil(len(data) / config.batch_utts)
    total_steps = config.epochs * batches_per_epoch
    result = TrainingResult(checkpoint=checkpoint)
    last_good = checkpoint.copy()
    step = 0

    for epoch in range(config.epochs):
        order = derive_rng(config.seed, "batch-order", epoch).permutation(len(data))
        epoch_loss = epoch_correct = epoch_frames = 0.0

        for start in range(0, len(data), config.batch_utts):
            progress = step / (total_steps - 1) if total_steps > 1 else 0.0
            lr = lr_at(config, progress)
            rate = dropout_rate(config.dropout, progress)
            rng = derive_rng(config.seed, "dropout", step)

            summed: Dict[str, np.ndarray] = {}
            batch_loss = batch_correct = batch_frames = 0.0
            try:
                for index in order[start:start + config.batch_utts]:
                    inputs, targets = data.examples[data.utt_ids[int(index)]]
                    grads, loss, log_post = model.loss_and_gradients(inputs, targets, rate, rng)
                    frames = len(targets)
                    for name, grad in grads.items():
                        if name in summed:
                            summed[name] += grad * frames
                        else:
                            summed[name] = grad * frames
                    batch_loss += loss * frames
                    batch_correct += float(np.sum(np.argmax(log_post, axis=1) == targets))
                    batch_frames += frames
            except NumericError as exc:
                raise TrainingDivergedError(f"Training diverged at step {step}: {exc}",
                                            last_good=last_good, step=step) from exc

            mean_loss = batch_loss / batch_frames
            if not math.isfinite(mean_loss):
                raise TrainingDivergedError(f"Loss became {mean_loss} at step {step}",
                                            last_good=last_good, step=step)

            _apply_update(checkpoint.params, summed, lr, config.max_param_change)
            if not all(np.all(np.isfinite(p)) for p in checkpoint.params.values()):
                raise TrainingDivergedError(f"Parameters became non-finite at step {step}",
                                            last_good=last_good, step=step)
            last_good = checkpoint.copy()

            result.steps.append({
                "step": step, "epoch": epoch, "progress": progress, "lr": lr, "dropout": rate,
                "loss": mean_loss, "frame_acc": batch_correct / batch_frames,
            })
            epoch_loss += batch_loss
            epoch_correct += batch_correct
            epoch_frames += batch_frames
            step += 1

        result.epoch_losses.append(epoch_loss / epoch_frames)
        result.epoch_accuracies.append(epoch_correct / epoch_frames)
        logger.info("%s epoch %d/%d: loss %.4f, frame accuracy %.3f", config.stage.value, epoch + 1,
                    config.epochs, result.epoch_losses[-1], result.epoch_accuracies[-1])

    checkpoint.metadata.update({
        "stage": config.stage.value,
        "epoch": config.epochs,
        "seed": int(config.seed),
        "steps": step,
        "config_hash": checkpoint.config_hash,
        "stage_config_hash": _stage_hash(config),
        "conditions": list(data.conditions),
    })
    if metrics_path is not None:
        write_metrics(result.steps, metrics_path, checkpoint.config_hash)
    return result


def _stage_hash(config: StageConfig) -> str:
    return hash_document(config.model_dump(mode="json"))


def transfer_init(source: Checkpoint, target_config: ModelConfig) -> Checkpoint:
    """Copy every tensor of `source`, output layer included, into a Stage-2 starting model"""
    expected = expected_shapes(target_config)
    actual = source.shapes()
    mismatches: List[Dict[str, Any]] = []
    for name in sorted(set(expected) | set(actual)):
        if expected.get(name) != actual.get(name):
            mismatches.append({"tensor": name, "source": actual.get(name), "target": expected.get(name)})

    if not mismatches and source.config_hash != target_config.config_hash():
        for index, (a, b) in enumerate(zip(source.config.layers, target_config.layers), 1):
            if a != b:
                mismatches.append({"tensor": f"layer{index:02d}", "source": a.model_dump(mode="json"),
                                   "target": b.model_dump(mode="json")})
        if not mismatches:
            mismatches.append({"tensor": "config", "source": source.config_hash,
                               "target": target_config.config_hash()})

    if mismatches:
        listing = ", ".join(f"{m['tensor']} {m['source']} != {m['target']}" for m in mismatches)
        raise TransferError(f"Source model does not match the target architecture: {listing}", mismatches)

    target = source.copy()
    target.metadata.update({"stage": "stage2-init", "source_stage": source.metadata.get("stage"),
                            "source_setup": source.metadata.get("setup")})
    return target

    """Mark a trained checkpoint with its setup, keeping the training recipe under `recipe`"""
def tag_setup(checkpoint: Checkpoint, setup: str) -> Checkpoint:
    """Mark a trained checkpoint with its setup; the training recipe stays under "recipe\""""
    if setup not in SETUP_STAGES:
        raise DomainError(f"Unknown setup: {setup}")
    recipe = checkpoint.metadata.get("stage")
    if recipe in SETUP_STAGES.values():
        recipe = checkpoint.metadata.get("recipe")
    checkpoint.metadata.update({"setup": setup, "stage": SETUP_STAGES[setup], "recipe": recipe})
    return checkpoint


def run_two_staged(clean: TrainingData, multicondition: TrainingData, target: TrainingData,
                   model_config: ModelConfig, stage1: StageConfig, stage2: StageConfig,
                   seed: int = 0, metrics_dir: Optional[Union[str, Path]] = None) -> "OrderedDict[str, Checkpoint]":
    """
    The four comparison setups from one shared random initialization:

      baseline     Stage-1 recipe on clean data only
      stage1_only  Stage-1 recipe on multi-condition data
      stage2_only  transfer of baseline, fine-tuned on target data
      two_staged   transfer of stage1_only, fine-tuned on target data
    """
    init = build_model(model_config, seed)
    metrics_dir = Path(metrics_dir) if metrics_dir is not None else None

    def metrics(name: str) -> Optional[Path]:
        return metrics_dir / f"{name}.metrics.csv" if metrics_dir is not None else None

    models: "OrderedDict[str, Checkpoint]" = OrderedDict()
    for name, data in (("baseline", clean), ("stage1_only", multicondition)):
        models[name] = tag_setup(train_stage(init, data, stage1, metrics(name)).checkpoint, name)

    for name, source in (("stage2_only", "baseline"), ("two_staged", "stage1_only")):
        start = transfer_init(models[source], model_config)
        models[name] = tag_setup(train_stage(start, target, stage2, metrics(name)).checkpoint, name)

    logger.info("Trained setups: %s", ", ".join(models))
    return models
