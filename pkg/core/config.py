"""
Experiment Configuration

Pydantic schemas for every configurable part of the pipeline. Unknown keys
are rejected everywhere; the validated document hashes to the config hash
embedded in all artifacts.
"""

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

CONFIG_HASH_LENGTH = 16


class StrictModel(BaseModel):
    """Base schema: unknown keys are errors"""

    model_config = ConfigDict(extra="forbid")


class Condition(str, Enum):
    CLEAN = "clean"
    REVERB = "reverb"
    REVERB_REAL_NOISE = "reverb_real_noise"


class AugmentationSpec(StrictModel):
    """How one corrupted copy of a corpus is synthesized"""

    condition: Condition = Condition.REVERB_REAL_NOISE
    snr_db_range: Tuple[float, float] = (10.0, 20.0)
    max_superposed_noises: int = Field(default=3, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    speed_factors: Tuple[float, ...] = (0.9, 1.0, 1.1)

    @field_validator("snr_db_range")
    @classmethod
    def _ordered_range(cls, value):
        low, high = value
        if low > high:
            raise ValueError(f"snr_db_range lower bound {low} exceeds upper bound {high}")
        return value

    @field_validator("speed_factors")
    @classmethod
    def _positive_factors(cls, value):
        if any(f <= 0 for f in value):
            raise ValueError("speed factors must be positive")
        return value


class LayerKind(str, Enum):
    TDNN = "tdnn"
    LSTMP = "lstmp"


class LayerSpec(StrictModel):
    """One hidden layer of the acoustic model"""

    kind: LayerKind
    context: Optional[List[int]] = None
    out_dim: Optional[int] = Field(default=None, ge=1)
    cell_dim: Optional[int] = Field(default=None, ge=1)
    proj_dim: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind == LayerKind.TDNN:
            if not self.context or self.out_dim is None:
                raise ValueError("tdnn layers need a non-empty context and out_dim")
            if len(set(self.context)) != len(self.context):
                raise ValueError(f"duplicate offsets in tdnn context {self.context}")
        else:
            if self.cell_dim is None or self.proj_dim is None:
                raise ValueError("lstmp layers need cell_dim and proj_dim")
        return self

    @property
    def output_dim(self) -> int:
        return self.out_dim if self.kind == LayerKind.TDNN else self.proj_dim


def tdnn(context: List[int], out_dim: int = 1024) -> LayerSpec:
    return LayerSpec(kind=LayerKind.TDNN, context=list(context), out_dim=out_dim)


def lstmp(cell_dim: int = 1024, proj_dim: int = 256) -> LayerSpec:
    return LayerSpec(kind=LayerKind.LSTMP, cell_dim=cell_dim, proj_dim=proj_dim)


def default_layers() -> List[LayerSpec]:
    """The seven-TDNN / three-LSTMP stack at full width"""
    return [
        tdnn([-2, -1, 0, 1, 2]),
        tdnn([-1, 0, 1]),
        tdnn([-1, 0, 1]),
        lstmp(),
        tdnn([-3, 0, 3]),
        tdnn([-3, 0, 3]),
        lstmp(),
        tdnn([-3, 0, 3]),
        tdnn([-3, 0, 3]),
        lstmp(),
    ]


class ModelConfig(StrictModel):
    """Network description; widths are multiplied by scale_factor"""

    input_dim: int = Field(default=300, ge=1)
    layers: List[LayerSpec] = Field(default_factory=default_layers)
    num_outputs: int = Field(default=40, ge=2)
    scale_factor: float = Field(default=1.0 / 16.0, gt=0.0, le=1.0)

    def scaled_layers(self) -> List[LayerSpec]:
        """Layer specs with every width multiplied by scale_factor (at least 1)"""

        def scale(dim: Optional[int]) -> Optional[int]:
            if dim is None:
                return None
            return max(1, int(round(dim * self.scale_factor)))

        return [
            layer.model_copy(update={
                "out_dim": scale(layer.out_dim),
                "cell_dim": scale(layer.cell_dim),
                "proj_dim": scale(layer.proj_dim),
            })
            for layer in self.layers
        ]

    def config_hash(self) -> str:
        return hash_document(self.model_dump(mode="json"))


class DropoutSchedule(StrictModel):
    """Piecewise-linear dropout rate over training progress"""

    breakpoints: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.0), (1.0, 0.0)])

    @field_validator("breakpoints")
    @classmethod
    def _valid_breakpoints(cls, value):
        if len(value) < 2:
            raise ValueError("a dropout schedule needs at least two breakpoints")
        progress = [p for p, _ in value]
        if progress[0] != 0.0 or progress[-1] != 1.0:
            raise ValueError("dropout breakpoints must start at progress 0 and end at 1")
        if any(b <= a for a, b in zip(progress, progress[1:])):
            raise ValueError("dropout breakpoint progress must be strictly increasing")
        if any(not 0.0 <= r < 1.0 for _, r in value):
            raise ValueError("dropout rates must lie in [0, 1)")
        return value

    @classmethod
    def parse(cls, text: str) -> "DropoutSchedule":
        """
        Parse a Kaldi-style schedule string such as '0,0@0.2,0.3@0.5,0'.

        Entries without '@' take the first and last positions; a two-entry
        string like '0,0' is a constant schedule.
        """
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(parts) < 2:
            raise ConfigError(f"Invalid dropout schedule: {text!r}")
        points = []
        for i, part in enumerate(parts):
            if "@" in part:
                rate, at = part.split("@", 1)
                points.append((float(at), float(rate)))
            elif i == 0:
                points.append((0.0, float(part)))
            elif i == len(parts) - 1:
                points.append((1.0, float(part)))
            else:
                raise ConfigError(f"Interior dropout entry needs a position: {part!r}")
        try:
            return cls(breakpoints=points)
        except ValidationError as exc:
            raise ConfigError(f"Invalid dropout schedule {text!r}: {exc}") from exc


STAGE1_DROPOUT = [(0.0, 0.0), (0.2, 0.0), (0.5, 0.3), (1.0, 0.0)]
STAGE2_DROPOUT = [(0.0, 0.0), (1.0, 0.0)]
STAGE2_DEFAULTS = {"lr_init": 1e-6, "lr_final": 1e-7, "dropout": {"breakpoints": STAGE2_DROPOUT}}


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class StageConfig(StrictModel):
    """Training hyper-parameters for one stage"""

    stage: Stage = Stage.STAGE1
    lr_init: float = Field(default=1e-3, gt=0.0)
    lr_final: float = Field(default=1e-4, gt=0.0)
    epochs: int = Field(default=4, ge=0)
    dropout: DropoutSchedule = Field(default_factory=lambda: DropoutSchedule(breakpoints=STAGE1_DROPOUT))
    batch_utts: int = Field(default=4, ge=1)
    max_param_change: Optional[float] = Field(default=2.0, gt=0.0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @model_validator(mode="before")
    @classmethod
    def _stage_defaults(cls, data: Any) -> Any:
        # a partial stage2 section starts from the fine-tuning defaults
        if isinstance(data, dict) and data.get("stage") == Stage.STAGE2.value:
            return {**STAGE2_DEFAULTS, **data}
        return data

    @model_validator(mode="after")
    def _decreasing_rate(self):
        if self.lr_final > self.lr_init:
            raise ValueError(f"lr_final {self.lr_final} exceeds lr_init {self.lr_init}")
        return self

    @classmethod
    def stage1(cls, **overrides) -> "StageConfig":
        values = dict(stage=Stage.STAGE1, lr_init=1e-3, lr_final=1e-4,
                      dropout=DropoutSchedule(breakpoints=STAGE1_DROPOUT))
        values.update(overrides)
        return cls(**values)

    @classmethod
    def stage2(cls, **overrides) -> "StageConfig":
        values = dict(stage=Stage.STAGE2, lr_init=1e-6, lr_final=1e-7,
                      dropout=DropoutSchedule(breakpoints=STAGE2_DROPOUT))
        values.update(overrides)
        return cls(**values)


class FeatureConfig(StrictModel):
    """MFCC front-end settings"""

    sample_rate_hz: int = Field(default=16000, ge=1)
    frame_length_ms: float = Field(default=25.0, gt=0.0)
    frame_shift_ms: float = Field(default=10.0, gt=0.0)
    preemphasis: float = Field(default=0.97, ge=0.0, lt=1.0)
    num_mel_bins: int = Field(default=40, ge=1)
    num_ceps: int = Field(default=40, ge=1)
    low_freq_hz: float = Field(default=20.0, ge=0.0)
    high_freq_hz: float = Field(default=7600.0, gt=0.0)
    log_floor: float = Field(default=1e-10, gt=0.0)
    splice_left: int = Field(default=2, ge=0)
    splice_right: int = Field(default=2, ge=0)
    embedding_dim: int = Field(default=100, ge=1)
    embedding_seed: int = Field(default=20190708, ge=0)
    apply_cmn: bool = False

    @model_validator(mode="after")
    def _ceps_fit(self):
        if self.num_ceps > self.num_mel_bins:
            raise ValueError("num_ceps cannot exceed num_mel_bins")
        if self.high_freq_hz > self.sample_rate_hz / 2:
            raise ValueError("high_freq_hz above Nyquist")
        if self.embedding_dim < 2 * self.num_ceps:
            raise ValueError("embedding_dim must hold the per-recording mean and std (2 * num_ceps)")
        return self


class ScoringOptions(StrictModel):
    """WER scoring and decoding options"""

    normalize: bool = False
    silence_symbol: int = 0


class PathsConfig(StrictModel):
    clean_manifest: Optional[str] = None
    clean_alignments: Optional[str] = None
    target_manifest: Optional[str] = None
    target_alignments: Optional[str] = None
    rir_dir: Optional[str] = None
    noise_dir: Optional[str] = None
    heldout_rir_dir: Optional[str] = None
    heldout_noise_dir: Optional[str] = None
    symbol_table: Optional[str] = None
    workdir: str = "work"
    eval_sets: Dict[str, str] = Field(default_factory=dict)


class ExperimentConfig(StrictModel):
    """Everything a reproducible experiment needs"""

    paths: PathsConfig = Field(default_factory=PathsConfig)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    stage1: StageConfig = Field(default_factory=StageConfig.stage1)
    stage2: StageConfig = Field(default_factory=StageConfig.stage2)
    model: ModelConfig = Field(default_factory=ModelConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    scoring: ScoringOptions = Field(default_factory=ScoringOptions)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    jobs: int = Field(default=1, ge=1)
    # float64 keeps saved and in-memory models bit-identical across resumes
    checkpoint_dtype: Literal["float32", "float64"] = "float64"

    @model_validator(mode="before")
    @classmethod
    def _tag_stages(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            for key in (Stage.STAGE1.value, Stage.STAGE2.value):
                section = data.get(key)
                if isinstance(section, dict) and "stage" not in section:
                    data[key] = {**section, "stage": key}
        return data

    @model_validator(mode="after")
    def _stages(self):
        if self.stage1.stage != Stage.STAGE1 or self.stage2.stage != Stage.STAGE2:
            raise ValueError("stage1/stage2 sections must carry matching stage tags")
        if self.model.input_dim != (self.features.num_ceps * (1 + self.features.splice_left
                                                              + self.features.splice_right)
                                    + self.features.embedding_dim):
            raise ValueError("model.input_dim does not match the spliced feature + embedding size")
        return self

    def config_hash(self) -> str:
        """Hash of everything that affects results; worker count does not"""
        return hash_document(self.model_dump(mode="json", exclude={"jobs"}))

    def with_overrides(self, seed: Optional[int] = None, jobs: Optional[int] = None) -> "ExperimentConfig":
        """Apply CLI global flags; the seed also reseeds augmentation and both stages"""
        config = self
        if seed is not None:
            config = config.model_copy(update={
                "seed": seed,
                "augmentation": config.augmentation.model_copy(update={"seed": seed}),
                "stage1": config.stage1.model_copy(update={"seed": seed}),
                "stage2": config.stage2.model_copy(update={"seed": seed}),
            })
        if jobs is not None:
            config = config.model_copy(update={"jobs": jobs})
        return config


def hash_document(document: Any) -> str:
    """Stable short hash of a JSON-compatible document"""
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:CONFIG_HASH_LENGTH]


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """Read and validate an experiment config file (defaults when path is None)"""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config is not valid JSON: {path} ({exc})") from exc
    return parse_config(document)


def parse_config(document: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc


def config_schema() -> Dict[str, Any]:
    """JSON schema published for experiment config files"""
    return ExperimentConfig.model_json_schema()
