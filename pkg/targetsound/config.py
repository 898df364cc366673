"""Experiment configuration: JSON file <-> validated frozen dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .errors import ConfigError, NotFound

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    clip_seconds: float = 10.0
    sample_rate: int = 16000
    snr_range: Tuple[float, float] = (-5.0, 10.0)
    n_interference_range: Tuple[int, int] = (1, 3)
    reference_seconds: float = 10.0
    seed: int = 0
    trim_threshold_db: float = -45.0
    trim_frame_ms: float = 25.0

    def __post_init__(self) -> None:
        if self.clip_seconds <= 0 or self.reference_seconds <= 0:
            raise ConfigError("data.synth: clip and reference durations must be positive")
        if self.sample_rate <= 0:
            raise ConfigError("data.synth.sample_rate must be positive")
        lo, hi = self.snr_range
        if not lo <= hi:
            raise ConfigError(f"data.synth.snr_range is empty: {self.snr_range}")
        n_lo, n_hi = self.n_interference_range
        if not 0 <= n_lo <= n_hi:
            raise ConfigError(
                f"data.synth.n_interference_range is empty: {self.n_interference_range}"
            )
        if self.reference_samples != self.clip_samples:
            # stage 3 encodes extracted clips with the reference encoder
            raise ConfigError("data.synth: reference_seconds must equal clip_seconds")
        if self.trim_threshold_db >= 0:
            raise ConfigError("data.synth.trim_threshold_db must be negative")

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def reference_samples(self) -> int:
        return int(round(self.reference_seconds * self.sample_rate))


@dataclass(frozen=True)
class DataConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_train: int = 200
    n_test: int = 50
    toy_clips_per_class: int = 6
    toy_backgrounds: int = 4
    bank_dir: Optional[str] = None
    background_dir: Optional[str] = None
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("data: n_train must be >= 1 and n_test >= 0")
        if self.toy_clips_per_class < 2:
            raise ConfigError("data.toy_clips_per_class must be >= 2 (target + reference)")


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 128
    n_classes: int = 8
    con_channels: Tuple[int, ...] = (16, 32, 64, 128)
    con_n_fft: int = 512
    con_hop: int = 256
    tse_filters: int = 64
    tse_kernel: int = 32
    tse_bottleneck: int = 64
    tse_hidden: int = 128
    tse_blocks: int = 4
    tse_repeats: int = 1
    tsd_filters: int = 64
    tsd_kernel: int = 640
    tsd_stride: int = 320
    tsd_conv_channels: int = 64
    tsd_rnn_hidden: int = 64

    def __post_init__(self) -> None:
        if len(self.con_channels) != 4:
            raise ConfigError("model.con_channels must list exactly four block widths")
        if self.tse_kernel < 2 or self.tse_kernel % 2:
            raise ConfigError("model.tse_kernel must be an even number >= 2")
        for name in ("embedding_dim", "n_classes", "tse_filters", "tsd_filters", "tsd_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 1.5
    fmse: bool = True
    tmse: bool = True
    sisdr: bool = True
    reduction: str = "sum"
    window_size: int = 512
    hop_size: int = 128

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "tau"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss_weights.{name} must be finite and >= 0, got {value}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("loss_weights.reduction must be 'sum' or 'mean'")
        if not (self.fmse or self.tmse or self.sisdr):
            raise ConfigError("loss_weights: at least one of fmse, tmse, sisdr must be enabled")


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    epochs: int
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.stage_id not in (1, 2, 3):
            raise ConfigError(f"stages: stage_id must be 1, 2 or 3, got {self.stage_id}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"stages[{self.stage_id}]: invalid optimizer or epoch settings")


def _default_stages() -> Tuple[StagePlan, ...]:
    return (StagePlan(1, 50), StagePlan(2, 50), StagePlan(3, 30))


@dataclass(frozen=True)
class TrainingConfig:
    cycles: int = 1
    share_encoders: bool = False
    use_detection: bool = True
    binarize_detection: bool = False
    stage3_from_scratch: bool = False
    grad_clip: float = 5.0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.cycles < 1:
            raise ConfigError("training.cycles must be >= 1")
        if self.threads < 1:
            raise ConfigError("training.threads must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    median_window: int = 5
    segment_seconds: float = 1.0
    onset_collar: float = 0.2
    offset_ratio: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.median_window < 1 or self.segment_seconds <= 0 or self.onset_collar < 0:
            raise ConfigError("eval: invalid binarization or scoring settings")


@dataclass(frozen=True)
class AblationRow:
    f: bool
    t: bool
    s: bool
    tau: float = 0.0

    @property
    def label(self) -> str:
        flags = "".join(c if on else "-" for c, on in (("f", self.f), ("t", self.t), ("s", self.s)))
        return f"{flags} w={self.tau:g}"


def _loss_grid() -> Tuple[AblationRow, ...]:
    rows = [
        AblationRow(True, False, False),
        AblationRow(False, True, False),
        AblationRow(False, False, True),
        AblationRow(True, True, False),
        AblationRow(True, False, True),
        AblationRow(False, True, True),
        AblationRow(True, True, True),
    ]
    rows += [AblationRow(True, True, True, tau) for tau in (0.2, 0.5, 1.0, 1.2, 1.5, 1.8, 2.0)]
    return tuple(rows)


@dataclass(frozen=True)
class AblationConfig:
    rows: Tuple[AblationRow, ...] = field(default_factory=_loss_grid)

    def __post_init__(self) -> None:
        for row in self.rows:
            if not (row.f or row.t or row.s):
                raise ConfigError(f"ablation row {row.label} enables no loss term")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossConfig = field(default_factory=LossConfig)
    stages: Tuple[StagePlan, ...] = field(default_factory=_default_stages)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})"
            )
        ids = [plan.stage_id for plan in self.stages]
        if sorted(ids) != [1, 2, 3] or len(ids) != 3:
            raise ConfigError(f"stages must define stage_id 1, 2 and 3 exactly once, got {ids}")

    def stage(self, stage_id: int) -> StagePlan:
        return next(plan for plan in self.stages if plan.stage_id == stage_id)


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        options = get_args(hint)
        if value is None and type(None) in options:
            return None
        inner = [opt for opt in options if opt is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
        return _from_dict(hint, value, where)
    if origin in (tuple, Tuple):
        args = get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint!r}")


def _from_dict(cls: type, raw: Dict[str, Any], prefix: str = "") -> Any:
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = prefix or "config"
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        key = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(value, hints[name], key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a parsed JSON document and build the experiment config."""

    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    return _from_dict(ExperimentConfig, raw)


def config_to_dict(cfg: Any) -> Dict[str, Any]:
    def convert(value: Any) -> Any:
        if dataclasses.is_dataclass(value):
            return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        return value

    return convert(cfg)


def load_config(path: Path) -> ExperimentConfig:
    """Read and validate an experiment config file."""

    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise NotFound(f"Config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(raw)
    log.info("Loaded config %s (hash %s)", path, config_hash(cfg)[:12])
    return cfg


def save_config(cfg: ExperimentConfig, path: Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=4)
    return target


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, threads: Optional[int] = None) -> ExperimentConfig:
    """Apply command line overrides to a validated config."""

    if seed is not None:
        synth = dataclasses.replace(cfg.data.synth, seed=seed)
        cfg = dataclasses.replace(cfg, seed=seed, data=dataclasses.replace(cfg.data, synth=synth))
    if threads is not None:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, threads=threads))
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def substream_seed(root_seed: int, name: str) -> int:
    """Derive an independent seed for the named random substream."""

    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
