"""Run configuration: one JSON document with model/training/corpus/probe/eval sections."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .corpus import SizeDistribution
from .probe import BRACS_CLASSES, BRACS_COARSE_MAP, COARSE_CLASSES, LabelMapping, ProbeConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1.5e-4
    min_lr: float = 0.0
    warmup_steps: int = 40
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    log_every: int = 10
    checkpoint_every: int = 0


@dataclass
class CorpusConfig:
    count: int = 1000
    threshold: float = 0.1
    mu: float = 256.0
    sigma: float = 64.0
    clamp_min: int = 64
    clamp_max: int = 512
    roi_sizes_csv: Optional[str] = None
    workers: int = 1


@dataclass
class ProbeSection:
    kind: str = "mlp"
    hidden_dim: int = 256
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    select_metric: Optional[str] = None
    standardize: bool = True
    task: str = "fine"
    classes: list = field(default_factory=lambda: list(BRACS_CLASSES))
    coarse_map: Optional[dict] = field(default_factory=lambda: dict(BRACS_COARSE_MAP))
    coarse_classes: Optional[list] = field(default_factory=lambda: list(COARSE_CLASSES))
    region_mode: str = "tile"


@dataclass
class EvalConfig:
    runs: int = 100
    fractions: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_learning_rate: float = 200.0


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: {"preset": "tiny"})
    training: TrainingConfig = field(default_factory=TrainingConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived views ------------------------------------------------------
    def vit(self) -> ViTConfig:
        m = dict(self.model)
        preset = m.pop("preset", "tiny")
        try:
            return ViTConfig.preset(preset, **m).validate()
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None

    def size_distribution(self) -> SizeDistribution:
        c = self.corpus
        return SizeDistribution(c.mu, c.sigma, c.clamp_min, c.clamp_max)

    def label_mapping(self) -> LabelMapping:
        p = self.probe
        if p.task != "coarse":
            return LabelMapping(list(p.classes))
        return LabelMapping(list(p.classes), p.coarse_map, p.coarse_classes)

    def probe_config(self, seed: int) -> ProbeConfig:
        p = self.probe
        metric = p.select_metric or ("macro" if p.task == "coarse" else "weighted")
        return ProbeConfig(kind=p.kind, hidden_dim=p.hidden_dim, epochs=p.epochs, lr=p.lr,
                           batch_size=p.batch_size, weight_decay=p.weight_decay, seed=seed,
                           select_metric=metric, standardize=p.standardize).validate()

    def validate(self) -> "RunConfig":
        try:
            self.vit()
            self.size_distribution()
            self.label_mapping()
            self.probe_config(0)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        t = self.training
        if t.steps < 0 or t.batch_size < 1 or t.lr <= 0 or t.warmup_steps < 0:
            raise ConfigError("training: steps >= 0, batch_size >= 1, lr > 0, warmup_steps >= 0 required")
        if self.corpus.count < 1 or self.corpus.workers < 1:
            raise ConfigError("corpus: count and workers must be >= 1")
        if self.probe.task not in ("fine", "coarse"):
            raise ConfigError(f"probe.task must be 'fine' or 'coarse', got {self.probe.task!r}")
        if self.probe.region_mode not in ("tile", "resize"):
            raise ConfigError(f"probe.region_mode must be 'tile' or 'resize', got {self.probe.region_mode!r}")
        e = self.eval
        if e.runs < 1:
            raise ConfigError("eval.runs must be >= 1")
        if len(e.fractions) != 3 or abs(sum(e.fractions) - 1.0) > 1e-9 or min(e.fractions) < 0:
            raise ConfigError(f"eval.fractions must be three non-negative numbers summing to 1, got {e.fractions}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        from .metrics import config_digest

        return config_digest(self.to_dict())


_SECTIONS = {"training": TrainingConfig, "corpus": CorpusConfig, "probe": ProbeSection, "eval": EvalConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    top_known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top_known)
    if unknown:
        raise ConfigError(f"unknown top-level config keys {unknown}")
    kwargs = {}
    for key, val in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], val, key)
        elif key == "model":
            if not isinstance(val, dict):
                raise ConfigError("model: expected an object")
            vit_keys = {f.name for f in fields(ViTConfig)} | {"preset"}
            bad = sorted(set(val) - vit_keys)
            if bad:
                raise ConfigError(f"model: unknown keys {bad}")
            kwargs[key] = dict(val)
        else:
            kwargs[key] = val
    return RunConfig(**kwargs).validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` assignments; values parse as JSON, else as strings."""
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                seed: Optional[int] = None) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
