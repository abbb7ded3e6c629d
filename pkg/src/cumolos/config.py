"""Single-document pipeline configuration (YAML).

Every section defaults to the full-scale reference setting, so an empty file is
a valid config. Unknown keys and invalid values are collected and reported
together.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, CumolosError
from .evaluation import MetricsSettings
from .field_io import DEFAULT_VARIABLES, SNR_THRESHOLD, SyntheticSpec
from .inference import AGGREGATIONS, COMPOSITIONS
from .model import ModelConfig
from .patching import CurriculumSchedule
from .training import TrainConfig


@dataclass
class FieldIOConfig:
    snr_threshold: float = SNR_THRESHOLD
    clamp_min: float = -5.0
    clamp_max: float = 5.0
    window_t: int = 64
    window_g: int = 64
    gate_limit: int = 64
    variable_names: dict = field(default_factory=lambda: dict(DEFAULT_VARIABLES))


@dataclass
class SynthConfig:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_train_files: int = 9
    n_test_files: int = 1
    test_seed_offset: int = 1000
    format: str = "cmls"


@dataclass
class PatchingConfig:
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)


@dataclass
class InferenceConfig:
    n_members: int = 50
    base_seed: int = 0
    composition: str = "paste-visible"
    aggregation: str = "all"
    mask_ratio: float | None = None  # None -> curriculum r_end stored in the checkpoint
    clamp_output: bool = True
    batch_size: int = 50
    max_patches: int | None = None


@dataclass
class EvaluateConfig:
    metrics: MetricsSettings = field(default_factory=MetricsSettings)
    reconstructors: list = field(default_factory=lambda: ["cumolos", "meanfilter8"])


@dataclass
class PathsConfig:
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    output_dir: str = "runs"


@dataclass
class PipelineConfig:
    field_io: FieldIOConfig = field(default_factory=FieldIOConfig)
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    patching: PatchingConfig = field(default_factory=PatchingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str, problems: list):
    """Instantiate dataclass ``cls`` from nested dicts, recording problems."""
    obj = cls()
    if data is None:
        return obj
    if not isinstance(data, dict):
        problems.append(f"{where}: expected a mapping, got {type(data).__name__}")
        return obj
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            problems.append(f"{where}.{key}: unknown key")
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            setattr(obj, key, _build(type(current), value, f"{where}.{key}", problems))
        elif isinstance(current, tuple) and isinstance(value, list):
            setattr(obj, key, tuple(value))
        else:
            if isinstance(current, bool) and not isinstance(value, bool):
                problems.append(f"{where}.{key}: expected true/false, got {value!r}")
                continue
            if isinstance(current, (int, float)) and not isinstance(current, bool) and value is not None:
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    problems.append(f"{where}.{key}: expected a number, got {value!r}")
                    continue
                if isinstance(current, int) and isinstance(value, float) and not value.is_integer():
                    problems.append(f"{where}.{key}: expected an integer, got {value!r}")
                    continue
                value = type(current)(value)
            setattr(obj, key, value)
    return obj


def validate(cfg: PipelineConfig) -> list[str]:
    problems = []
    checks = [
        ("synthetic.spec", cfg.synthetic.spec.validate),
        ("patching.curriculum", cfg.patching.curriculum.validate),
        ("model", cfg.model.validate),
        ("training", cfg.training.validate),
    ]
    for name, check in checks:
        try:
            check()
        except CumolosError as exc:
            problems.append(f"{name}: {exc}")
    fio = cfg.field_io
    if fio.snr_threshold < 0:
        problems.append("field_io.snr_threshold must be >= 0")
    if fio.clamp_min > fio.clamp_max:
        problems.append("field_io.clamp_min must not exceed clamp_max")
    if fio.window_t % 2 or fio.window_g % 2 or fio.window_t < 2 or fio.window_g < 2:
        problems.append("field_io.window_t and window_g must be positive and even (2x2 micro-patches)")
    if fio.window_g > fio.gate_limit:
        problems.append("field_io.window_g must not exceed gate_limit")
    inf = cfg.inference
    if inf.n_members < 1:
        problems.append("inference.n_members must be >= 1")
    if inf.composition not in COMPOSITIONS:
        problems.append(f"inference.composition must be one of {list(COMPOSITIONS)}")
    if inf.aggregation not in AGGREGATIONS:
        problems.append(f"inference.aggregation must be one of {list(AGGREGATIONS)}")
    if inf.mask_ratio is not None and not 0 <= inf.mask_ratio < 1:
        problems.append("inference.mask_ratio must lie in [0, 1)")
    if inf.batch_size < 1:
        problems.append("inference.batch_size must be >= 1")
    m = cfg.evaluate.metrics
    if m.data_range <= 0:
        problems.append("evaluate.metrics.data_range must be positive")
    if m.f_cut_hz <= 0 or m.tol < 0:
        problems.append("evaluate.metrics.f_cut_hz must be positive and tol non-negative")
    if m.ssim_window % 2 == 0:
        problems.append("evaluate.metrics.ssim_window must be odd")
    known = {"cumolos", "meanfilter8", "oracle"}
    for r in cfg.evaluate.reconstructors:
        if r not in known:
            problems.append(f"evaluate.reconstructors: unknown reconstructor {r!r}")
    if cfg.synthetic.format not in ("cmls", "nc"):
        problems.append("synthetic.format must be 'cmls' or 'nc'")
    return problems


def from_dict(data: dict | None) -> PipelineConfig:
    problems: list[str] = []
    cfg = _build(PipelineConfig, data or {}, "config", problems)
    cfg.explicit_sections = set(data or {}) if isinstance(data, dict) else set()
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(data)
