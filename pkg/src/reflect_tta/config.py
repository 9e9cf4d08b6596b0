"""Run configuration: one JSON document covering every module config plus seeds and counts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .data import DomainShiftSpec, SceneSpec
from .errors import ConfigError
from .reflect import AdaptConfig
from .segmentor import SegmentorConfig
from .similarity import SimilarityConfig
from .synthesizer import SynthConfig


@dataclass
class TrainConfig:
    seg_epochs: int = 30
    seg_lr: float = 1e-3
    seg_batch_size: int = 8
    synth_epochs: int = 100

    def __post_init__(self):
        if self.seg_epochs < 0 or self.synth_epochs < 0 or self.seg_batch_size < 1 or self.seg_lr <= 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class RunConfig:
    seed: int = 0
    counts: tuple = (200, 50, 100)
    shifted_splits: tuple = ("test",)
    eval_split: str = "test"
    workers: int = 1
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec.benchmark)
    segmentor: SegmentorConfig = field(default_factory=SegmentorConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise ValueError("counts must be three non-negative split sizes")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.segmentor.k_classes != self.scene.k_classes:
            raise ValueError("segmentor.k_classes must match scene.k_classes")

    def to_dict(self):
        return asdict(self)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if is_dataclass(current):
            value = _build(type(current), value, path)
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(data):
    return _build(RunConfig, data, "")


def loads(text, source="<config>"):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(data)


def load(path):
    """Parse a JSON run config; ``None`` gives all defaults.  OSError propagates."""
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return loads(fh.read(), path)


def dumps(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
