"""Experiment configuration: one nested document covering every module knob.

Files are JSON.  Command-line overrides use dotted paths, e.g.
``train.lr=3e-4`` or ``metrics.snr_pairing=index``; the value is parsed as
JSON when possible and kept as a string otherwise.  Unknown keys are
rejected everywhere.  :func:`resolved_snapshot` returns the fully expanded
document that is written beside every output.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class GeometrySection:
    depth_scale: float = 1.0  # stored depth units -> millimetres
    units: str = "mm"


@dataclass
class SamplingSection:
    n_spine: int = 10000  # points kept per spine cloud
    method: str = "voxel"  # "voxel" (voxel grid, then random) or "fps"
    voxel_size: float = 1.0  # mm
    n_gt: int = 4096  # GT_Complete cardinality
    seed: int = 0


@dataclass
class LabelingSection:
    method: str = "mesh"  # "mesh" (surface distance) or "mask" (rendered label lookup)
    tau_bg: float = 3.0  # mm


@dataclass
class MetricsSection:
    tau_vis: Optional[float] = None  # None -> 2x median spacing of the partial
    fscore_fraction: float = 0.01  # of the GT bbox longest side
    emd_method: str = "auto"
    emd_epsilon: float = 1e-3
    emd_points: int = 1024  # both clouds resampled to this size before EMD
    snr_pairing: str = "nn"
    iou_voxel_fraction: float = 0.05  # IoU_input voxel edge, fraction of GT bbox diagonal


@dataclass
class ModelSection:
    preset: str = "bench"
    encoder_depth: Optional[int] = None
    decoder_depth: Optional[int] = None
    num_heads: Optional[int] = None
    hidden_dim: Optional[int] = None
    knn_feature: Optional[int] = None
    knn_geom: Optional[int] = None
    n_input: Optional[int] = None
    n_tokens: Optional[int] = None
    n_coarse: Optional[int] = None
    fold_factor: Optional[int] = None
    feature_dim: Optional[int] = None
    global_dim: Optional[int] = None
    mlp_ratio: Optional[int] = None
    offset_scale: Optional[float] = None
    dtype: Optional[str] = None
    seed: int = 0

    def build(self) -> ModelConfig:
        overrides = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name not in ("preset", "seed") and getattr(self, f.name) is not None
        }
        return ModelConfig.preset(self.preset, **overrides)


@dataclass
class TrainSection:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    max_steps: Optional[int] = None
    seed: int = 0
    coarse_weight: float = 1.0

    def build(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2),
            eps=self.eps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            max_steps=self.max_steps,
            seed=self.seed,
            coarse_weight=self.coarse_weight,
        )


@dataclass
class PipelineSection:
    levels: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    min_points: int = 64  # frames with fewer points for a level are skipped
    completer: str = "model"  # "model", "identity" (oracle) or "copy" (input baseline)
    seed: int = 0


@dataclass
class Config:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    labeling: LabelingSection = field(default_factory=LabelingSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def validate(self) -> "Config":
        choices = {
            ("sampling", "method"): ("voxel", "fps"),
            ("labeling", "method"): ("mesh", "mask"),
            ("metrics", "emd_method"): ("exact", "approx", "auto"),
            ("metrics", "snr_pairing"): ("nn", "index"),
            ("pipeline", "completer"): ("model", "identity", "copy"),
        }
        for (sec, key), allowed in choices.items():
            value = getattr(getattr(self, sec), key)
            if value not in allowed:
                raise ConfigError(f"{sec}.{key}={value!r}; choose from {list(allowed)}")
        positive = [
            ("geometry", "depth_scale"), ("sampling", "voxel_size"), ("sampling", "n_spine"), ("sampling", "n_gt"),
            ("labeling", "tau_bg"), ("metrics", "fscore_fraction"), ("metrics", "emd_epsilon"),
            ("metrics", "emd_points"), ("metrics", "iou_voxel_fraction"), ("pipeline", "min_points"),
        ]
        for sec, key in positive:
            if not getattr(getattr(self, sec), key) > 0:
                raise ConfigError(f"{sec}.{key} must be positive")
        if self.metrics.tau_vis is not None and not self.metrics.tau_vis > 0:
            raise ConfigError("metrics.tau_vis must be positive or null")
        self.model.build()
        self.train.build()
        return self


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return list(value)
    return value


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config keys{where}: {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> Config:
    return _build(Config, data).validate()


def to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings to a nested dict (copied)."""
    out = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw.strip())
    return out


def load_config(path=None, overrides=()) -> Config:
    """Defaults, then the JSON file at ``path`` (if any), then dotted overrides."""
    data = to_dict(Config())
    if path is not None:
        from .io.jsonio import load_json

        user = load_json(path)
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        # a resolved snapshot is itself a valid config file
        user = {k: v for k, v in user.items() if k not in SNAPSHOT_ONLY_KEYS}
        merged = config_from_dict(_merge(data, user))
        data = to_dict(merged)
    return config_from_dict(apply_overrides(data, overrides))


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, dict) and isinstance(out[k], dict):
            unknown = sorted(set(v) - set(out[k]))
            if unknown:
                raise ConfigError(f"unknown config keys in {k}: {unknown}")
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


SNAPSHOT_ONLY_KEYS = ("resolved", "invocation")


def resolved_snapshot(cfg: Config, invocation: dict | None = None) -> dict:
    """Full config plus the concrete model/train settings it resolves to."""
    snap = to_dict(cfg)
    if invocation is not None:
        snap["invocation"] = invocation
    snap["resolved"] = {
        "model": dataclasses.asdict(cfg.model.build()),
        "train": dataclasses.asdict(cfg.train.build()),
    }
    return snap


def config_from_snapshot(snap: dict) -> Config:
    data = {k: v for k, v in snap.items() if k not in SNAPSHOT_ONLY_KEYS}
    return config_from_dict(data)
