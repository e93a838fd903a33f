"""Sectioned JSON configuration shared by all CLI subcommands.

One document with ``model``, ``train``, ``infer``, and ``data`` sections.
Defaults describe the full-size setup (12 leads, 10 s at 500 Hz, 40
segments); a config file only lists the keys it overrides, and CLI flags
override the file in turn.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import SynthConfig, inject_anomaly, synth_normal
from .errors import ConfigError
from .model import ModelConfig, full_scale_config
from .train import TrainConfig


@dataclass
class InferConfig:
    n_passes: int = 4
    local_mode: str = "coverage"          # or "iid"
    normalize_by_visits: bool = False

    def validate(self) -> "InferConfig":
        if self.n_passes < 1:
            raise ConfigError("infer.n_passes must be >= 1")
        if self.local_mode not in ("coverage", "iid"):
            raise ConfigError(f"unknown infer.local_mode {self.local_mode!r}")
        return self


@dataclass
class DataConfig:
    """Synthesis and record-geometry settings used by ``synth``."""

    fs: int = 500
    duration: float = 10.0
    n_leads: int = 12
    heart_rate: float = 72.0
    heart_rate_jitter: float = 0.004
    phase_jitter: float = 0.0         # per-record first-beat shift, fraction of RR
    noise_std: float = 0.015
    wander_amp: float = 0.08
    t_amp_range: tuple[float, float] = (0.21, 0.39)
    p_amp_range: tuple[float, float] = (0.10, 0.20)
    anomaly_magnitude: float = 0.6
    anomaly_center_range: tuple[float, float] = (0.05, 0.95)
    n_normal: int = 500
    n_abnormal: int = 100
    n_test_normal: int = 100

    def __post_init__(self):
        self.t_amp_range = tuple(self.t_amp_range)
        self.p_amp_range = tuple(self.p_amp_range)
        self.anomaly_center_range = tuple(self.anomaly_center_range)

    def validate(self) -> "DataConfig":
        if self.fs < 1 or self.duration <= 0 or self.n_leads < 1:
            raise ConfigError("data.fs, data.duration, data.n_leads must be positive")
        if min(self.n_normal, self.n_abnormal, self.n_test_normal) < 0:
            raise ConfigError("record counts must be >= 0")
        for name in ("t_amp_range", "p_amp_range", "anomaly_center_range"):
            pair = getattr(self, name)
            if len(pair) != 2 or pair[0] > pair[1]:
                raise ConfigError(f"data.{name} must be an ordered (low, high) pair")
        if self.anomaly_magnitude <= 0:
            raise ConfigError("data.anomaly_magnitude must be > 0")
        if not 0.0 <= self.phase_jitter < 0.3:
            raise ConfigError("data.phase_jitter must be in [0, 0.3)")
        return self


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=full_scale_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "CliConfig":
        self.model.validate()
        self.train.validate()
        self.infer.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "infer": asdict(self.infer),
            "data": asdict(self.data),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CliConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(doc) - {"model", "train", "infer", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "model" in doc:
            base = cfg.model.to_dict()
            extra = set(doc["model"]) - set(base)
            if extra:
                raise ConfigError(f"unknown model keys: {sorted(extra)}")
            base.update(doc["model"])
            cfg.model = ModelConfig.from_dict(base)
        for section, maker in (("train", TrainConfig), ("infer", InferConfig),
                               ("data", DataConfig)):
            if section in doc:
                known = {f.name for f in fields(maker)}
                extra = set(doc[section]) - known
                if extra:
                    raise ConfigError(f"unknown {section} keys: {sorted(extra)}")
                setattr(cfg, section, replace(getattr(cfg, section), **doc[section]))
        return cfg.validate()


def synth_record(data: DataConfig, seed, kind: str | None = None,
                 trim_to: int | None = None, record_id: str | None = None):
    """One benchmark record from the data section, normal or injected.

    ``seed`` may be an int or a sequence; per-record waveform amplitudes are
    drawn from the configured ranges so records differ in shape, not just
    noise.  ``trim_to`` crops the record length to a multiple (pass the
    model's segment count so the grid divides evenly).
    """
    seed_list = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng(seed_list + [777])
    scfg = SynthConfig(
        fs=data.fs, duration=data.duration, n_leads=data.n_leads,
        heart_rate=data.heart_rate, heart_rate_jitter=data.heart_rate_jitter,
        phase_offset=0.3 if data.phase_jitter == 0.0
        else 0.3 + float(rng.uniform(-data.phase_jitter, data.phase_jitter)),
        noise_std=data.noise_std, wander_amp=data.wander_amp,
        t_amp=float(rng.uniform(*data.t_amp_range)),
        p_amp=float(rng.uniform(*data.p_amp_range)),
        seed=seed_list, trim_to_multiple=trim_to,
    )
    rec = synth_normal(scfg)
    if kind is not None:
        rec = inject_anomaly(rec, kind, seed=seed_list + [1],
                             beat_period_s=60.0 / data.heart_rate,
                             magnitude=data.anomaly_magnitude,
                             center_range=data.anomaly_center_range)
    if record_id is not None:
        rec.id = record_id
    return rec


def load_config(path: str | Path | None) -> CliConfig:
    """Defaults when ``path`` is None, else defaults overlaid with the file."""
    if path is None:
        return CliConfig().validate()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path.name}: invalid JSON ({exc})")
    return CliConfig.from_dict(doc)


def save_config(cfg: CliConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
