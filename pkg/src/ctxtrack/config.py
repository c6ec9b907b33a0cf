"""Configuration records and the YAML run-config loader."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import yaml

ENV_PREFIX = "CTXTRACK_"
TOTAL_STRIDE = 16


@dataclass(frozen=True)
class ModelConfig:
    search_size: int = 64
    template_size: int = 32
    patch: int = 4
    stage_dims: tuple = (16, 32)
    d_enc: int = 64
    depth: int = 9
    heads: int = 4
    mlp_ratio: int = 4
    insertion_layers: tuple = (3, 6, 9)
    n_context: int = 1
    d_scan: int = 32
    d_state: int = 16
    head_hidden: int = 32
    window: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(self.stage_dims))
        object.__setattr__(self, "insertion_layers", tuple(int(k) for k in self.insertion_layers))
        if self.patch * 4 != TOTAL_STRIDE:
            raise ValueError(f"patch stride {self.patch} with two 2x2 merges must total {TOTAL_STRIDE}")
        for name in ("search_size", "template_size"):
            if getattr(self, name) % TOTAL_STRIDE:
                raise ValueError(f"{name} must be a multiple of {TOTAL_STRIDE}")
        layers = self.insertion_layers
        if any(k < 1 or k > self.depth for k in layers):
            raise ValueError(f"insertion_layers {layers} must lie in [1, {self.depth}]")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError(f"insertion_layers {layers} must be strictly increasing")
        if self.n_context < 1:
            raise ValueError("n_context must be >= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 or None")

    @property
    def n_search(self) -> int:
        return self.search_size ** 2 // TOTAL_STRIDE ** 2

    @property
    def n_template(self) -> int:
        return self.template_size ** 2 // TOTAL_STRIDE ** 2

    @property
    def grid(self) -> int:
        return self.search_size // TOTAL_STRIDE


@dataclass(frozen=True)
class DataConfig:
    kind: str = "easy"
    n_train: int = 64
    n_eval: int = 5
    length: int = 60
    eval_length: int = 60
    canvas: int = 160
    seed: int = 0
    search_factor: float = 4.0
    template_factor: float = 2.0

    def __post_init__(self):
        if self.kind not in ("easy", "occlusion"):
            raise ValueError(f"unknown data kind {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    clip_len: int = 2
    max_gap: int = 20
    lr_backbone: float = 5e-4
    lr_ratio: float = 10.0
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    decay_start: float = 0.8
    decay_factor: float = 0.1
    lambda1: float = 5.0
    lambda2: float = 2.0
    center_jitter: float = 0.5
    scale_jitter: float = 0.15
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if not 0.0 <= self.decay_start <= 1.0:
            raise ValueError("decay_start is a fraction of total steps")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def lr_other(self) -> float:
        return self.lr_backbone * self.lr_ratio


AXES = ("context_onoff", "cp_length", "insertion_layers", "windowed_baseline")


@dataclass(frozen=True)
class AblationConfig:
    axis: str = "context_onoff"
    seeds: tuple = (0, 1, 2, 3, 4)
    workers: int = 1
    window: int = 4

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.axis not in AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}; choose from {AXES}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return config_hash(self.to_dict())


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "ablation": AblationConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(_plain(d), sort_keys=True).encode()).hexdigest()[:16]


def build_section(cls, values: dict | None, section: str = ""):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{section or cls.__name__}]: {', '.join(unknown)}")
    return cls(**values)


def run_config_from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
    return RunConfig(**{name: build_section(cls, d.get(name), name) for name, cls in _SECTIONS.items()})


def _coerce(text: str):
    return yaml.safe_load(text)


def env_overrides(environ=None) -> dict:
    """Collect ``CTXTRACK_<SECTION>__<KEY>=value`` overrides (values parsed as YAML)."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX):].lower().partition("__")
        out.setdefault(section, {})[name] = _coerce(value)
    return out


def merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, values in extra.items():
        if isinstance(values, dict):
            out.setdefault(section, {})
            out[section] = {**out[section], **values}
        else:
            out[section] = values
    return out


def load_run_config(path: str | None = None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Read YAML, then apply environment and explicit overrides in that order.

    YAML syntax errors propagate as ``yaml.YAMLError`` carrying line/column marks.
    """
    doc: dict = {}
    if path:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: top level must be a mapping of sections")
    doc = merge(doc, env_overrides(environ))
    doc = merge(doc, overrides or {})
    return run_config_from_dict(doc)


def dump_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
