"""
Acoustic Model Plugin

Interleaved TDNN and projected-LSTM layers with a softmax output, written
directly in numpy with hand-derived backpropagation so every gradient can
be checked against finite differences.

Parameter names follow `layerNN.<kind>.<tensor>` for hidden layers and
`output.affine.<tensor>` for the output layer; a Checkpoint is the ordered
name -> array mapping plus its ModelConfig and training metadata.
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from ..config import DropoutSchedule, LayerKind, LayerSpec, ModelConfig
from ..errors import ConfigError, DataError, DomainError, NumericError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

CHECKPOINT_MAGIC = b"TSCKPT01"
CHECKPOINT_VERSION = 1
OUTPUT_PREFIX = "output.affine"
LSTMP_TENSORS = ("W_x", "W_r", "b", "w_ic", "w_fc", "w_oc", "W_rm")


@dataclass
class Checkpoint:
    """Model weights plus the configuration and metadata needed to use them"""

    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config.model_copy(deep=True),
            params=OrderedDict((k, v.copy()) for k, v in self.params.items()),
            metadata=json.loads(json.dumps(self.metadata)),
        )

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(value.shape) for name, value in self.params.items()}

    def layer_names(self) -> List[str]:
        """Distinct layer prefixes in network order"""
        names: List[str] = []
        for name in self.params:
            prefix = name.rsplit(".", 1)[0]
            if prefix not in names:
                names.append(prefix)
        return names

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every tensor"""
        if list(self.params) != list(other.params):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params.values(), other.params.values())
        )


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Parameter shapes implied by a ModelConfig"""
    if not config.layers:
        raise ConfigError("Model config has no hidden layers")
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    in_dim = config.input_dim
    for index, layer in enumerate(config.scaled_layers(), 1):
        prefix = f"layer{index:02d}.{layer.kind.value}"
        if layer.kind == LayerKind.TDNN:
            shapes[f"{prefix}.weight"] = (layer.out_dim, in_dim * len(layer.context))
            shapes[f"{prefix}.bias"] = (layer.out_dim,)
        else:
            cell, proj = layer.cell_dim, layer.proj_dim
            shapes[f"{prefix}.W_x"] = (4 * cell, in_dim)
            shapes[f"{prefix}.W_r"] = (4 * cell, proj)
            shapes[f"{prefix}.b"] = (4 * cell,)
            shapes[f"{prefix}.w_ic"] = (cell,)
            shapes[f"{prefix}.w_fc"] = (cell,)
            shapes[f"{prefix}.w_oc"] = (cell,)
            shapes[f"{prefix}.W_rm"] = (proj, cell)
        in_dim = layer.output_dim
    shapes[f"{OUTPUT_PREFIX}.weight"] = (config.num_outputs, in_dim)
    shapes[f"{OUTPUT_PREFIX}.bias"] = (config.num_outputs,)
    return shapes


def build_model(config: ModelConfig, seed: int = 0) -> Checkpoint:
    """Fan-in scaled uniform initialization, deterministic per seed"""
    shapes = expected_shapes(config)
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()

    for name, shape in shapes.items():
        tensor = name.rsplit(".", 1)[1]
        if tensor in ("bias", "b"):
            params[name] = np.zeros(shape)
        elif ".tdnn." in name:
            params[name] = _uniform(rng, shape, shape[1], np.sqrt(2.0))
        elif tensor in ("w_ic", "w_fc", "w_oc"):
            params[name] = _uniform(rng, shape, shape[0], 1.0)
        else:
            params[name] = _uniform(rng, shape, shape[1], 1.0)

    metadata = {"stage": "init", "epoch": 0, "seed": int(seed), "config_hash": config.config_hash()}
    logger.debug("Built model with %d tensors (%d parameters)", len(params),
                 sum(p.size for p in params.values()))
    return Checkpoint(config=config, params=params, metadata=metadata)


def context_index(num_frames: int, offsets: List[int]) -> np.ndarray:
    """(len(offsets), T) frame indices with edge replication"""
    base = np.arange(num_frames)
    return np.stack([np.clip(base + o, 0, num_frames - 1) for o in offsets])


class TdnnLayer:
    """Affine map over frames at fixed offsets, then ReLU"""

    def __init__(self, spec: LayerSpec, weight: np.ndarray, bias: np.ndarray):
        self.spec = spec
        self.context = list(spec.context)
        self.weight = weight
        self.bias = bias

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        index = context_index(inputs.shape[0], self.context)
        spliced = np.concatenate([inputs[i] for i in index], axis=1)
        z = spliced @ self.weight.T + self.bias
        return np.maximum(z, 0.0), {"index": index, "spliced": spliced, "z": z, "in_dim": inputs.shape[1]}

    def backward(self, d_out: np.ndarray, cache: Dict[str, Any]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        dz = d_out * (cache["z"] > 0.0)
        grads = {"weight": dz.T @ cache["spliced"], "bias": dz.sum(axis=0)}
        d_spliced = dz @ self.weight
        in_dim = cache["in_dim"]
        d_in = np.zeros((dz.shape[0], in_dim))
        for j, index in enumerate(cache["index"]):
            np.add.at(d_in, index, d_spliced[:, j * in_dim:(j + 1) * in_dim])
        return d_in, grads


class LstmpLayer:
    """
    LSTM with forget gate, peepholes and a recurrent projection.

    i = s(W_ix x + W_ir r' + w_ic*c' + b_i)    f = s(... + w_fc*c' + b_f)
    c = f*c' + i*tanh(W_cx x + W_cr r' + b_c)   o = s(... + w_oc*c + b_o)
    m = o*tanh(c)                               r = W_rm m
    """

    def __init__(self, spec: LayerSpec, tensors: Dict[str, np.ndarray]):
        self.spec = spec
        self.cell = spec.cell_dim
        self.W_x = tensors["W_x"]
        self.W_r = tensors["W_r"]
        self.b = tensors["b"]
        self.w_ic = tensors["w_ic"]
        self.w_fc = tensors["w_fc"]
        self.w_oc = tensors["w_oc"]
        self.W_rm = tensors["W_rm"]

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        num_frames = inputs.shape[0]
        C = self.cell
        P = self.W_rm.shape[0]
        pre = inputs @ self.W_x.T + self.b

        gates = {name: np.zeros((num_frames, C)) for name in ("i", "f", "g", "o", "c", "c_prev", "m")}
        r_all = np.zeros((num_frames, P))
        r_prev_all = np.zeros((num_frames, P))
        r_prev = np.zeros(P)
        c_prev = np.zeros(C)

        for t in range(num_frames):
            a = pre[t] + self.W_r @ r_prev
            i = expit(a[:C] + self.w_ic * c_prev)
            f = expit(a[C:2 * C] + self.w_fc * c_prev)
            g = np.tanh(a[2 * C:3 * C])
            c = f * c_prev + i * g
            o = expit(a[3 * C:] + self.w_oc * c)
            m = o * np.tanh(c)
            r = self.W_rm @ m

            gates["i"][t], gates["f"][t], gates["g"][t], gates["o"][t] = i, f, g, o
            gates["c"][t], gates["c_prev"][t], gates["m"][t] = c, c_prev, m
            r_prev_all[t] = r_prev
            r_all[t] = r
            r_prev, c_prev = r, c

        gates["inputs"] = inputs
        gates["r_prev"] = r_prev_all
        return r_all, gates

    def backward(self, d_out: np.ndarray, cache: Dict[str, np.ndarray]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        num_frames = d_out.shape[0]
        C = self.cell
        d_pre = np.zeros((num_frames, 4 * C))
        grads = {
            "W_rm": np.zeros_like(self.W_rm),
            "w_ic": np.zeros(C), "w_fc": np.zeros(C), "w_oc": np.zeros(C),
        }
        dr_next = np.zeros(self.W_rm.shape[0])
        dc_next = np.zeros(C)

        for t in reversed(range(num_frames)):
            i, f, g, o = cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t]
            c, c_prev, m = cache["c"][t], cache["c_prev"][t], cache["m"][t]

            dr = d_out[t] + dr_next
            grads["W_rm"] += np.outer(dr, m)
            dm = self.W_rm.T @ dr
            tanh_c = np.tanh(c)
            da_o = dm * tanh_c * o * (1.0 - o)
            dc = dm * o * (1.0 - tanh_c ** 2) + dc_next + da_o * self.w_oc
            da_i = dc * g * i * (1.0 - i)
            da_g = dc * i * (1.0 - g ** 2)
            da_f = dc * c_prev * f * (1.0 - f)

            grads["w_oc"] += da_o * c
            grads["w_ic"] += da_i * c_prev
            grads["w_fc"] += da_f * c_prev

            dc_next = dc * f + da_i * self.w_ic + da_f * self.w_fc
            da = np.concatenate([da_i, da_f, da_g, da_o])
            d_pre[t] = da
            dr_next = self.W_r.T @ da

        grads["W_x"] = d_pre.T @ cache["inputs"]
        grads["W_r"] = d_pre.T @ cache["r_prev"]
        grads["b"] = d_pre.sum(axis=0)
        return d_pre @ self.W_x, grads


def tdnn_forward(layer: TdnnLayer, inputs: np.ndarray) -> np.ndarray:
    return layer.forward(np.asarray(inputs, dtype=np.float64))[0]


def lstmp_forward(layer: LstmpLayer, inputs: np.ndarray) -> np.ndarray:
    return layer.forward(np.asarray(inputs, dtype=np.float64))[0]


def dropout_rate(schedule: DropoutSchedule, progress: float) -> float:
    """Piecewise-linear interpolation of the schedule at `progress`"""
    if not 0.0 <= progress <= 1.0:
        raise DomainError(f"Training progress must lie in [0, 1], got {progress}")
    xs = [p for p, _ in schedule.breakpoints]
    ys = [r for _, r in schedule.breakpoints]
    return float(np.interp(progress, xs, ys))


def receptive_field(config: ModelConfig) -> Tuple[int, int]:
    """Left and right context in frames contributed by the TDNN layers"""
    left = right = 0
    for layer in config.layers:
        if layer.kind == LayerKind.TDNN:
            left += max(0, -min(layer.context))
            right += max(0, max(layer.context))
    return left, right


def has_recurrence(config: ModelConfig) -> bool:
    """LSTMP layers see unbounded left history"""
    return any(layer.kind == LayerKind.LSTMP for layer in config.layers)


class AcousticModel:
    """Forward and backward passes over a Checkpoint's parameters"""

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.config = checkpoint.config
        self.layers: List[Any] = []
        self.prefixes: List[str] = []
        params = checkpoint.params

        for index, spec in enumerate(self.config.scaled_layers(), 1):
            prefix = f"layer{index:02d}.{spec.kind.value}"
            self.prefixes.append(prefix)
            if spec.kind == LayerKind.TDNN:
                self.layers.append(TdnnLayer(spec, params[f"{prefix}.weight"], params[f"{prefix}.bias"]))
            else:
                self.layers.append(LstmpLayer(spec, {n: params[f"{prefix}.{n}"] for n in LSTMP_TENSORS}))

        self.out_weight = params[f"{OUTPUT_PREFIX}.weight"]
        self.out_bias = params[f"{OUTPUT_PREFIX}.bias"]

    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.config.input_dim:
            raise DomainError(f"Expected T x {self.config.input_dim} inputs, got shape {inputs.shape}")
        if inputs.shape[0] == 0:
            raise DomainError("Cannot run the network on zero frames")
        if not np.all(np.isfinite(inputs)):
            raise NumericError("Non-finite network input", layer_index=0)
        return inputs

    def _run(self, inputs: np.ndarray, rate: float, rng: Optional[np.random.Generator], train: bool):
        if train and rate > 0.0 and rng is None:
            raise DomainError("Train-mode dropout needs a random generator")
        if not 0.0 <= rate < 1.0:
            raise DomainError(f"Dropout rate must lie in [0, 1), got {rate}")

        caches = []
        h = inputs
        for index, layer in enumerate(self.layers, 1):
            h, cache = layer.forward(h)
            mask = None
            if train and rate > 0.0:
                keep = rng.random(h.shape[0]) >= rate
                mask = (keep / (1.0 - rate))[:, None]
                h = h * mask
            if not np.all(np.isfinite(h)):
                raise NumericError(f"Non-finite activations after layer {index}", layer_index=index)
            caches.append((cache, mask))

        logits = h @ self.out_weight.T + self.out_bias
        log_post = logits - logsumexp(logits, axis=1, keepdims=True)
        if not np.all(np.isfinite(log_post)):
            raise NumericError("Non-finite log-posteriors at the output layer",
                               layer_index=len(self.layers) + 1)
        return log_post, h, caches

    def forward(self, inputs: np.ndarray, rate: float = 0.0,
                rng: Optional[np.random.Generator] = None, mode: str = "eval") -> np.ndarray:
        """T x num_outputs log-posteriors"""
        if mode not in ("train", "eval"):
            raise DomainError(f"Unknown forward mode {mode!r}")
        log_post, _, _ = self._run(self._check_inputs(inputs), rate, rng, mode == "train")
        return log_post

    def backward(self, inputs: np.ndarray, targets: np.ndarray, rate: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tuple["OrderedDict[str, np.ndarray]", float]:
        """Gradients of the mean per-frame cross-entropy and the loss itself"""
        grads, loss, _ = self.loss_and_gradients(inputs, targets, rate, rng)
        return grads, loss

    def loss_and_gradients(self, inputs: np.ndarray, targets: np.ndarray, rate: float = 0.0,
                           rng: Optional[np.random.Generator] = None):
        """backward() plus the log-posteriors of the same pass"""
        inputs = self._check_inputs(inputs)
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (inputs.shape[0],):
            raise DomainError(f"Need one target per frame: {targets.shape[0]} targets, {inputs.shape[0]} frames")
        if np.any(targets < 0) or np.any(targets >= self.config.num_outputs):
            raise DomainError(f"Target ids must lie in [0, {self.config.num_outputs})")

        log_post, h, caches = self._run(inputs, rate, rng, train=rate > 0.0)
        num_frames = inputs.shape[0]
        frames = np.arange(num_frames)
        loss = float(-np.mean(log_post[frames, targets]))

        d_logits = np.exp(log_post)
        d_logits[frames, targets] -= 1.0
        d_logits /= num_frames

        grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        out_grads = {f"{OUTPUT_PREFIX}.weight": d_logits.T @ h, f"{OUTPUT_PREFIX}.bias": d_logits.sum(axis=0)}
        d_h = d_logits @ self.out_weight

        layer_grads = {}
        for index in reversed(range(len(self.layers))):
            cache, mask = caches[index]
            if mask is not None:
                d_h = d_h * mask
            d_h, tensors = self.layers[index].backward(d_h, cache)
            for name, value in tensors.items():
                layer_grads[f"{self.prefixes[index]}.{name}"] = value

        for name in self.checkpoint.params:
            grads[name] = out_grads[name] if name in out_grads else layer_grads[name]
        return grads, loss, log_post


def forward(model: Union[AcousticModel, Checkpoint], inputs: np.ndarray, rate: float = 0.0,
            rng: Optional[np.random.Generator] = None, mode: str = "eval") -> np.ndarray:
    if isinstance(model, Checkpoint):
        model = AcousticModel(model)
    return model.forward(inputs, rate, rng, mode)


def backward(model: Union[AcousticModel, Checkpoint], inputs: np.ndarray, targets: np.ndarray,
             rate: float = 0.0, rng: Optional[np.random.Generator] = None):
    if isinstance(model, Checkpoint):
        model = AcousticModel(model)
    return model.backward(inputs, targets, rate, rng)


def frame_accuracy(log_posteriors: np.ndarray, targets: np.ndarray) -> float:
    targets = np.asarray(targets)
    if len(targets) == 0:
        return 0.0
    return float(np.mean(np.argmax(log_posteriors, axis=1) == targets))


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path], dtype: str = "float32") -> Path:
    """
    Versioned binary checkpoint: magic, little-endian uint64 header length,
    JSON header (config, shapes, dtypes, metadata), then the tensors.
    """
    if dtype not in ("float64", "float32"):
        raise DomainError(f"Unsupported checkpoint dtype {dtype}")
    wire = "<f8" if dtype == "float64" else "<f4"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors, blobs, offset = [], [], 0
    for name, value in checkpoint.params.items():
        blob = np.ascontiguousarray(value, dtype=wire).tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "dtype": wire,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": checkpoint.config.model_dump(mode="json"),
        "config_hash": checkpoint.config_hash,
        "metadata": checkpoint.metadata,
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")

    temp_file = path.with_suffix(path.suffix + ".temp")
    with open(temp_file, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    temp_file.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"Not a checkpoint file: {path}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"Unsupported checkpoint version {header.get('format_version')} in {path}")

    config = ModelConfig.model_validate(header["config"])
    body = 16 + header_len
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["tensors"]:
        start = body + entry["offset"]
        data = np.frombuffer(raw[start:start + entry["nbytes"]], dtype=entry["dtype"])
        params[entry["name"]] = data.astype(np.float64).reshape(entry["shape"])

    expected = expected_shapes(config)
    actual = {name: tuple(value.shape) for name, value in params.items()}
    if dict(expected) != actual:
        raise DataError(f"Checkpoint {path} tensors do not match its config")
    return Checkpoint(config=config, params=params, metadata=header.get("metadata", {}))
