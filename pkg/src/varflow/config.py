"""Run configuration: dataclasses plus a strict YAML loader.

Config files must name every field; unknown or missing keys are rejected so a
training hyperparameter can never fall back to a silent default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class SignalConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    floor_eps: float = 1e-5
    f0_fmin: float = 60.0
    f0_fmax: float = 800.0
    f0_frame_length: int = 1024
    voicing_threshold: float = 0.45


@dataclass
class ModelConfig:
    vocab_size: int = 12
    d_model: int = 32
    n_heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 64
    conv_kernel: int = 3
    dropout: float = 0.1
    variance_mode: str = "flow"  # flow | reversed | mse
    granularity: str = "frame"  # frame | phoneme
    flow_layers: int = 4
    flow_bins: int = 10
    flow_bound: float = 5.0
    flow_min_bin: float = 1e-3
    flow_min_derivative: float = 1e-3
    flow_kernel: int = 3

    def __post_init__(self):
        aliases = {"flow-frame": ("flow", "frame"), "flow-phoneme": ("flow", "phoneme"),
                   "mse-baseline": ("mse", None)}
        if self.variance_mode in aliases:
            mode, gran = aliases[self.variance_mode]
            self.variance_mode = mode
            self.granularity = gran or self.granularity
        if self.variance_mode not in ("flow", "reversed", "mse"):
            raise ConfigError(f"variance_mode must be flow|reversed|mse, got {self.variance_mode!r}")
        if self.granularity not in ("frame", "phoneme"):
            raise ConfigError(f"granularity must be frame|phoneme, got {self.granularity!r}")


@dataclass
class TrainConfig:
    alpha: float = 0.1
    batch_size: int = 8
    max_steps: int = 3000
    warmup_steps: int = 400
    lr_scale: float = 0.2
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    seed: int = 1234

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("batch_size", "max_steps", "warmup_steps", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.alpha < 0 or self.lr_scale <= 0 or self.grad_clip <= 0:
            raise ConfigError("train.alpha must be >= 0; lr_scale and grad_clip > 0")


@dataclass
class SynthConfig:
    sigma: float = 0.333
    griffin_lim_iters: int = 32


@dataclass
class EvalConfig:
    lambdas: tuple[float, ...] = (-6, -4, -2, 2, 4, 6)
    gross_error: float = 0.2
    search_lo: float = 60.0
    search_hi: float = 800.0
    voicing_floor: float = -4.0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)


@dataclass
class RunConfig:
    signal: SignalConfig = field(default_factory=SignalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        d["eval"]["lambdas"] = list(d["eval"]["lambdas"])
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTION_CLS = {
    "signal": SignalConfig, "model": ModelConfig, "train": TrainConfig,
    "synth": SynthConfig, "eval": EvalConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    for name in names:
        if name not in data:
            raise ConfigError(f"missing config key '{where}.{name}'")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"section {where!r}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    for key in data:
        if key not in _SECTION_CLS:
            raise ConfigError(f"unknown config key '{key}'")
    parts = {}
    for name, cls in _SECTION_CLS.items():
        if name not in data:
            raise ConfigError(f"missing config section '{name}'")
        parts[name] = _build(cls, data[name], name)
    return RunConfig(**parts)


PRESETS = ("toy", "paper-scale")


def load_config(source: str | Path) -> RunConfig:
    """Load a config from a YAML path or a shipped preset name."""
    if str(source) in PRESETS:
        text = resources.files("varflow.presets").joinpath(f"{source}.yaml").read_text()
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    return from_dict(yaml.safe_load(text))


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
