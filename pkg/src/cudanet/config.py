"""Experiment configuration.

A single :class:`ExperimentConfig` drives dataset synthesis, training,
evaluation and reporting.  Parsing is strict: unknown keys are rejected with
their dotted path, values are type-checked, and every loaded config is
validated before use.  The canonical JSON form of a config yields a stable
``config_hash`` which is embedded in every artifact the config produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigurationError

CLASS_NAMES = ("sky", "road", "building", "vegetation", "vehicle")

DOMAINS = ("s", "m", "t")

ENV_SEED = "CUDANET_SEED"


# ---------------------------------------------------------------------------
# dataclass tree
# ---------------------------------------------------------------------------


@dataclass
class StyleParams:
    """Photometric style transform parameters (gain -> bias -> gamma -> hue)."""

    channel_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    hue_rotation: float = 0.0

    def validate(self, path: str = "style") -> None:
        values = [*self.channel_gain, *self.channel_bias, self.gamma, self.hue_rotation]
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError(f"{path}: style parameters must be finite")
        if self.gamma <= 0:
            raise ConfigurationError(f"{path}.gamma: must be > 0, got {self.gamma}")

    def is_identity(self) -> bool:
        return (
            tuple(self.channel_gain) == (1.0, 1.0, 1.0)
            and tuple(self.channel_bias) == (0.0, 0.0, 0.0)
            and self.gamma == 1.0
            and self.hue_rotation == 0.0
        )


@dataclass
class FogParams:
    """Transmission fog model: I = J*exp(-beta*d) + A*(1 - exp(-beta*d))."""

    beta: float = 0.0
    airlight: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth_near: float = 1.0
    depth_far: float = 10.0
    class_depth_offsets: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)

    def validate(self, path: str = "fog") -> None:
        values = [self.beta, *self.airlight, self.depth_near, self.depth_far,
                  *self.class_depth_offsets]
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError(f"{path}: fog parameters must be finite")
        if self.beta < 0:
            raise ConfigurationError(f"{path}.beta: must be >= 0, got {self.beta}")
        if any(a < 0 or a > 1 for a in self.airlight):
            raise ConfigurationError(f"{path}.airlight: components must lie in [0, 1]")
        min_offset = min(self.class_depth_offsets) if self.class_depth_offsets else 0.0
        if min(self.depth_near, self.depth_far) + min(min_offset, 0.0) <= 0:
            raise ConfigurationError(
                f"{path}: depth model must stay positive everywhere "
                f"(near={self.depth_near}, far={self.depth_far}, min offset={min_offset})"
            )


@dataclass
class LayoutParams:
    """Distribution parameters for procedural shape placement."""

    max_buildings: int = 3
    max_vehicles: int = 2
    vegetation_patches: int = 2
    noise_std: float = 0.02
    horizon_low: float = 0.30
    horizon_high: float = 0.45

    def validate(self, path: str = "layout") -> None:
        if self.max_buildings < 0 or self.max_vehicles < 0 or self.vegetation_patches < 0:
            raise ConfigurationError(f"{path}: shape counts must be >= 0")
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise ConfigurationError(f"{path}.noise_std: must be finite and >= 0")
        if not (0.0 < self.horizon_low <= self.horizon_high < 1.0):
            raise ConfigurationError(
                f"{path}: need 0 < horizon_low <= horizon_high < 1, "
                f"got ({self.horizon_low}, {self.horizon_high})"
            )


@dataclass
class DatasetConfig:
    """Tri-domain dataset: counts, per-domain scene seed ranges, style and fog."""

    root: Optional[str] = None
    height: int = 32
    width: int = 32
    num_classes: int = 5
    counts: dict = field(default_factory=lambda: {"s": 64, "m": 32, "t": 64})
    seed_starts: dict = field(default_factory=lambda: {"s": 1000, "m": 201000, "t": 401000})
    layout: LayoutParams = field(default_factory=LayoutParams)
    style_s: StyleParams = field(default_factory=StyleParams)
    style_m: StyleParams = field(default_factory=StyleParams)
    fog_t: FogParams = field(default_factory=FogParams)

    def validate(self, path: str = "dataset") -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigurationError(f"{path}: image dimensions must be >= 16x16")
        if self.height % 4 or self.width % 4:
            raise ConfigurationError(f"{path}: image dimensions must be divisible by 4")
        if not (2 <= self.num_classes <= len(CLASS_NAMES)):
            raise ConfigurationError(
                f"{path}.num_classes: must be in [2, {len(CLASS_NAMES)}], got {self.num_classes}"
            )
        for name, d in (("counts", self.counts), ("seed_starts", self.seed_starts)):
            if set(d.keys()) != set(DOMAINS):
                raise ConfigurationError(f"{path}.{name}: keys must be exactly {set(DOMAINS)}")
            for k, v in d.items():
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise ConfigurationError(f"{path}.{name}.{k}: must be a nonnegative integer")
        ranges = {
            d: range(self.seed_starts[d], self.seed_starts[d] + self.counts[d])
            for d in DOMAINS
        }
        for a in DOMAINS:
            for b in DOMAINS:
                if a >= b or not ranges[a] or not ranges[b]:
                    continue
                if ranges[a].start < ranges[b].stop and ranges[b].start < ranges[a].stop:
                    raise ConfigurationError(
                        f"{path}.seed_starts: scene seed ranges for domains "
                        f"'{a}' and '{b}' overlap; domains must not share scenes"
                    )
        if len(self.fog_t.class_depth_offsets) < self.num_classes:
            raise ConfigurationError(
                f"{path}.fog_t.class_depth_offsets: need at least "
                f"{self.num_classes} entries, got {len(self.fog_t.class_depth_offsets)}"
            )
        self.layout.validate(f"{path}.layout")
        self.style_s.validate(f"{path}.style_s")
        self.style_m.validate(f"{path}.style_m")
        self.fog_t.validate(f"{path}.fog_t")

    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.num_classes]


@dataclass
class ModelConfig:
    """Network sizes: content dim D_c, private dim D_z, encoder width."""

    d_c: int = 32
    d_z: int = 8
    base_channels: int = 16

    def validate(self, path: str = "model") -> None:
        if self.d_c < 4 or self.d_c % 4:
            raise ConfigurationError(f"{path}.d_c: must be a positive multiple of 4")
        if self.d_z < 1:
            raise ConfigurationError(f"{path}.d_z: must be >= 1")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigurationError(f"{path}.base_channels: must be a positive multiple of 4")


@dataclass
class LossWeights:
    """Weights of the combined objective (defaults 0.5, 0.1, 1, 1)."""

    lambda_rec: float = 0.5
    lambda_trans: float = 0.1
    lambda_seg: float = 1.0
    lambda_segadv: float = 1.0

    def validate(self, path: str = "loss_weights") -> None:
        for f_ in dataclasses.fields(self):
            v = getattr(self, f_.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{path}.{f_.name}: must be finite and >= 0")


@dataclass
class StageConfig:
    """Per-stage optimization settings."""

    steps: int = 2000
    batch_size: int = 8
    lr: float = 2.5e-4
    lr_disc: float = 1.0e-4
    optimizer: str = "sgd"
    momentum: float = 0.9
    poly_power: float = 0.9
    pseudo_label_threshold: Optional[float] = None
    log_every: int = 10

    def validate(self, path: str = "stage") -> None:
        if self.steps <= 0:
            raise ConfigurationError(f"{path}.steps: must be > 0")
        if self.batch_size <= 0:
            raise ConfigurationError(f"{path}.batch_size: must be > 0")
        if self.lr <= 0 or self.lr_disc <= 0:
            raise ConfigurationError(f"{path}: learning rates must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(
                f"{path}.optimizer: must be 'sgd' or 'adam', got {self.optimizer!r}"
            )
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError(f"{path}.momentum: must be in [0, 1)")
        if self.poly_power < 0:
            raise ConfigurationError(f"{path}.poly_power: must be >= 0")
        t = self.pseudo_label_threshold
        if t is not None and not (0.0 <= t <= 1.0):
            raise ConfigurationError(f"{path}.pseudo_label_threshold: must be in [0, 1] or null")
        if self.log_every < 1:
            raise ConfigurationError(f"{path}.log_every: must be >= 1")


@dataclass
class CycleConfig:
    """Cyclical training: T cycles of style/fog/dual steps plus the triangle loss."""

    T: int = 3
    lambda_cum: float = 0.25
    metric: str = "l2"
    step: StageConfig = field(
        default_factory=lambda: StageConfig(steps=200, pseudo_label_threshold=None)
    )

    def validate(self, path: str = "cyclic") -> None:
        if self.T < 1:
            raise ConfigurationError(f"{path}.T: must be >= 1")
        if not math.isfinite(self.lambda_cum) or self.lambda_cum < 0:
            raise ConfigurationError(f"{path}.lambda_cum: must be finite and >= 0")
        if self.metric not in ("l1", "l2", "cosine"):
            raise ConfigurationError(
                f"{path}.metric: must be one of 'l1', 'l2', 'cosine', got {self.metric!r}"
            )
        self.step.validate(f"{path}.step")


@dataclass
class TrainConfig:
    """Stage-wise and cyclical training settings."""

    aux_weight: float = 0.5
    source_only: StageConfig = field(default_factory=lambda: StageConfig(steps=400))
    s2m: StageConfig = field(default_factory=StageConfig)
    m2t: StageConfig = field(default_factory=StageConfig)
    s2t: StageConfig = field(default_factory=StageConfig)
    cyclic: CycleConfig = field(default_factory=CycleConfig)

    def validate(self, path: str = "train") -> None:
        if not math.isfinite(self.aux_weight) or self.aux_weight < 0:
            raise ConfigurationError(f"{path}.aux_weight: must be finite and >= 0")
        self.source_only.validate(f"{path}.source_only")
        self.s2m.validate(f"{path}.s2m")
        self.m2t.validate(f"{path}.m2t")
        self.s2t.validate(f"{path}.s2t")
        self.cyclic.validate(f"{path}.cyclic")

    def stage(self, name: str) -> StageConfig:
        if name not in ("source_only", "s2m", "m2t", "s2t"):
            raise ConfigurationError(f"unknown stage name: {name!r}")
        return getattr(self, name)


@dataclass
class ExperimentConfig:
    """Top-level experiment description."""

    seed: int = 0
    out_dir: str = "runs/exp"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigurationError("seed: must be >= 0")
        if not self.out_dir:
            raise ConfigurationError("out_dir: must be nonempty")
        self.dataset.validate("dataset")
        self.model.validate("model")
        self.loss_weights.validate("loss_weights")
        self.train.validate("train")

    def dataset_root(self) -> Path:
        if self.dataset.root:
            return Path(self.dataset.root)
        return Path(self.out_dir) / "dataset"

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))


# ---------------------------------------------------------------------------
# strict dict -> dataclass construction
# ---------------------------------------------------------------------------


def _to_plain(obj: Any) -> Any:
    """Convert tuples to lists recursively so YAML/JSON dumps stay clean."""
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        if value is None:
            if type(None) in args:
                return None
            raise ConfigurationError(f"invalid value for {path}: null not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"invalid value for {path}: expected a mapping")
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"invalid value for {path}: expected a sequence")
        elem = args[0] if args else float
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(value) != len(args):
            raise ConfigurationError(
                f"invalid value for {path}: expected {len(args)} entries, got {len(value)}"
            )
        return tuple(
            _coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args))
        )
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(f"invalid value for {path}: expected a mapping")
        return dict(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"invalid value for {path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"invalid value for {path}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"invalid value for {path}: expected a boolean")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"invalid value for {path}: expected a string")
        return value
    raise ConfigurationError(f"unsupported config field type at {path}: {tp!r}")


def _build(cls: type, data: dict, path: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        child = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigurationError(f"unknown config key: {child}")
        kwargs[key] = _coerce(value, hints[key], child)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from a plain mapping."""
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    cfg = _build(ExperimentConfig, data)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# overrides, environment, files
# ---------------------------------------------------------------------------


def apply_override(data: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` assignment in place (YAML-parsed value)."""
    if "=" not in assignment:
        raise ConfigurationError(f"override must look like key.path=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override has empty key: {assignment!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse override value {raw!r}: {exc}") from exc
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigurationError(f"override path {key!r} crosses a non-mapping key")
        node = nxt
    node[parts[-1]] = value


def load_config(
    path: str | Path | None,
    *,
    sets: typing.Sequence[str] = (),
    seed: int | None = None,
    out_dir: str | None = None,
    env: typing.Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Load a YAML config and fold in env/CLI overrides (file < env < flags)."""
    env = os.environ if env is None else env
    if path is None:
        data: dict = {}
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config file {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {p} must contain a mapping")
    if ENV_SEED in env:
        try:
            data["seed"] = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigurationError(f"{ENV_SEED} must be an integer") from exc
    for assignment in sets:
        apply_override(data, assignment)
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    return config_from_dict(data)


def save_yaml(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# hashing / provenance
# ---------------------------------------------------------------------------


def canonical_json(obj: Any) -> str:
    """Canonical JSON used wherever byte-stable serialization matters."""
    return json.dumps(_to_plain(obj), sort_keys=True, indent=2) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode("utf-8")).hexdigest()


def run_id(cfg: ExperimentConfig, command: str) -> str:
    """Deterministic git-style short id for one (config, command) pair."""
    digest = hashlib.sha256(f"{config_hash(cfg)}|{command}".encode("utf-8")).hexdigest()
    return digest[:12]
