"""Declarative run configuration (YAML) with strict key checking.

Defaults reproduce the strongest full ablation row: linear head, fan_max
init, RGB, long schedule, no photometric or scale augmentation, PWC-style
flow with concatenated inputs, 128 px crops and 5-frame windows.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

from .model import ModelConfig, input_channels


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    head: str = "linear"
    fan_mode: str = "fan_max"
    color_space: str = "rgb"
    ycbcr_standard: str = "bt601_full"
    base_width: int = 64
    depth: int = 3
    first_kernel: int = 5
    kernel: int = 3


@dataclass
class DataSection:
    root: Optional[str] = None
    train_split: str = "train"
    val_split: Optional[str] = None
    sequence_length: int = 5
    batch_size: int = 64
    crops_per_example: int = 8


@dataclass
class AugmentationSection:
    crop_size: Optional[int] = 128
    rotations: bool = True
    flips: bool = True
    photometric: bool = False
    photometric_p: float = 0.5
    random_scale: str = "off"
    scale_range: Tuple[float, float] = (0.25, 1.0)
    scale_values: Tuple[float, ...] = (1 / 4, 1 / 3, 1 / 2)


@dataclass
class FlowSection:
    mode: str = "cat"
    # label of whoever produced the fields (pwc, f1s, oracle); reporting only
    network: str = "pwc"
    source: str = "files"
    directory: Optional[str] = None


@dataclass
class ScheduleSection:
    preset: str = "long"
    base_lr: float = 0.005
    total_epochs: Optional[int] = None
    halving_epochs: Optional[List[int]] = None
    max_iterations: Optional[int] = None


@dataclass
class EvalSection:
    split: str = "test"
    val_every: int = 1


@dataclass
class OutputSection:
    dir: str = "runs/default"
    checkpoint_every: int = 0
    prefetch: int = 2


@dataclass
class RunConfig:
    run_id: str = "default"
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    flow: FlowSection = field(default_factory=FlowSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            in_channels=input_channels(self.data.sequence_length, self.flow.mode, m.color_space),
            out_channels=3 if m.color_space == "rgb" else 1,
            base_width=m.base_width,
            depth=m.depth,
            head=m.head,
            fan_mode=m.fan_mode,
            first_kernel=m.first_kernel,
            kernel=m.kernel,
        )

    def axes(self) -> dict:
        """The ablation axes, in table column order."""
        a = self.augmentation
        flow = "-" if self.flow.mode == "none" else f"{self.flow.network}+{self.flow.mode}"
        return {
            "output_activation": self.model.head,
            "initialization": self.model.fan_mode,
            "color_space": self.model.color_space,
            "schedule": self.schedule.preset,
            "random_photometric": a.photometric,
            "random_scales": a.random_scale != "off",
            "flow": flow,
            "random_crops": a.crop_size,
            "sequence_length": self.data.sequence_length,
        }

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for sec in d.values():
            if isinstance(sec, dict):
                for k, v in sec.items():
                    if isinstance(v, tuple):
                        sec[k] = list(v)
        return d


_SECTION_TYPES = {
    "model": ModelSection, "data": DataSection, "augmentation": AugmentationSection,
    "flow": FlowSection, "schedule": ScheduleSection, "eval": EvalSection, "output": OutputSection,
}
# written into manifests, ignored when a manifest is read back as a config
PASSTHROUGH = ("manifest",)

_CHOICES = {
    ("model", "head"): ("sigmoid", "linear"),
    ("model", "fan_mode"): ("fan_in", "fan_out", "fan_max"),
    ("model", "color_space"): ("rgb", "ycbcr"),
    ("model", "ycbcr_standard"): ("bt601_full", "bt601_studio"),
    ("augmentation", "random_scale"): ("off", "continuous", "discrete"),
    ("flow", "mode"): ("none", "rep", "cat"),
    ("flow", "source"): ("files", "synthetic"),
    ("schedule", "preset"): ("short", "long", "nah", "custom"),
}


def _line(node) -> int:
    return node.start_mark.line + 1


def _check_value(section, key, value, where):
    choices = _CHOICES.get((section, key))
    if choices is not None and value not in choices:
        raise ConfigError(f"{where}: {section}.{key} must be one of {choices}, got {value!r}")


def from_yaml_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse a run config; unknown sections or keys are errors naming the line."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: {e}") from e
    cfg = RunConfig()
    if root is None:
        return cfg
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{source}: top level must be a mapping")
    for knode, vnode in root.value:
        key = knode.value
        if key in PASSTHROUGH:
            continue
        if key in ("run_id", "seed"):
            value = yaml.safe_load(yaml.serialize(vnode))
            if key == "seed" and not isinstance(value, int):
                raise ConfigError(f"{source}: line {_line(knode)}: seed must be an integer")
            setattr(cfg, key, str(value) if key == "run_id" else value)
            continue
        if key not in _SECTION_TYPES:
            raise ConfigError(f"{source}: line {_line(knode)}: unknown section {key!r}")
        if not isinstance(vnode, yaml.MappingNode):
            raise ConfigError(f"{source}: line {_line(knode)}: section {key!r} must be a mapping")
        section = getattr(cfg, key)
        known = {f.name for f in fields(section)}
        for sk, sv in vnode.value:
            if sk.value not in known:
                raise ConfigError(f"{source}: line {_line(sk)}: unknown key {sk.value!r} in section {key!r}")
            value = yaml.safe_load(yaml.serialize(sv))
            if isinstance(value, list) and sk.value in ("scale_range", "scale_values"):
                value = tuple(value)
            _check_value(key, sk.value, value, f"{source}: line {_line(sk)}")
            setattr(section, sk.value, value)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return from_yaml_text(text, str(path))


def dump_config(cfg: RunConfig, extra: Optional[dict] = None) -> str:
    d = {"run_id": cfg.run_id, "seed": cfg.seed}
    d.update({k: v for k, v in cfg.to_dict().items() if k not in ("run_id", "seed")})
    if extra:
        d.update(extra)
    return yaml.safe_dump(d, sort_keys=False)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted ``section.key`` (or top-level) overrides."""
    cfg = dataclasses.replace(cfg, **{s: dataclasses.replace(getattr(cfg, s)) for s in _SECTION_TYPES})
    for dotted, value in overrides.items():
        if "." not in dotted:
            if dotted not in ("run_id", "seed"):
                raise ConfigError(f"unknown key {dotted!r}")
            setattr(cfg, dotted, value)
            continue
        sec, key = dotted.split(".", 1)
        if sec not in _SECTION_TYPES or key not in {f.name for f in fields(_SECTION_TYPES[sec])}:
            raise ConfigError(f"unknown key {dotted!r}")
        _check_value(sec, key, value, "override")
        setattr(getattr(cfg, sec), key, value)
    return cfg
