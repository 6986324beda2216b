"""Flat key-value configuration.

Every CLI verb accepts ``--config FILE``, a YAML mapping of flat keys to
scalars.  Each dataclass below takes the keys matching its field names; a key
no dataclass claims is an error so typos do not pass silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError

STAGES = ("text_style", "style_extractor", "tts")
ABLATIONS = ("none", "no_style_encoder", "no_style_decoder", "no_style_extractor")
TEACHERS = ("text_style", "style_extractor")


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 1200
    win_length: int = 1200
    hop_length: int = 240
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    f0_min: float = 60.0
    f0_max: float = 500.0
    yin_threshold: float = 0.15
    voicing_rms: float = 1e-3
    log_floor: float = 1e-5
    n_low_bins: int = 20
    context_k: int = 2
    duration_tolerance: int = 3
    norm_scope: str = "global"

    def __post_init__(self):
        if self.norm_scope not in ("global", "speaker"):
            raise ConfigError(f"norm_scope must be 'global' or 'speaker', got {self.norm_scope!r}")
        if not 0 < self.f0_min < self.f0_max:
            raise ConfigError("need 0 < f0_min < f0_max")

    @property
    def frame_seconds(self) -> float:
        return self.hop_length / self.sample_rate


@dataclass
class TextStyleConfig:
    d_style: int = 256
    text_d_model: int = 256
    text_layers: int = 4
    text_heads: int = 4
    text_ff: int = 512
    text_dropout: float = 0.1
    text_max_tokens: int = 64
    n_clusters: int = 8
    temperature: float = 0.1


@dataclass
class ExtractorConfig:
    d_style: int = 256
    codebook_size: int = 512
    ext_channels1: int = 64
    ext_channels2: int = 128
    n_res_blocks: int = 3
    d_speaker: int = 64
    commitment_beta: float = 0.25
    vq_ema: bool = False
    ema_decay: float = 0.99
    restart_dead_codes: bool = False
    segment_frames: int = 32


@dataclass
class AcousticConfig:
    d_model: int = 256
    d_style: int = 256
    enc_layers: int = 4
    dec_layers: int = 4
    n_heads: int = 2
    ffn_filter: int = 1024
    ffn_kernel: int = 9
    dropout: float = 0.1
    var_filter: int = 256
    var_kernel: int = 3
    var_dropout: float = 0.1
    style_dec_layers: int = 2
    style_dec_kernel: int = 5
    style_dec_heads: int = 2
    max_positions: int = 2000
    ablation: str = "none"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.ablation == "no_style_decoder" and self.d_style != self.d_model:
            raise ConfigError("no_style_decoder adds H_s' to H_p' and needs d_style == d_model")


@dataclass
class StageConfig:
    stage: str = "tts"
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    learning_rate: float = 1e-3
    warmup_steps: int = 400
    epochs: int = 50
    phase1_epochs: int = 10
    phase2_epochs: int = 5
    seed: int = 1234
    alpha: float = 1.0
    grad_clip: float = 1.0
    freeze: list = field(default_factory=list)
    ablation: str = "none"
    style_target: str = "post_quant"
    max_steps: int = 0
    checkpoint_every: int = 0
    augment_seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.style_target not in ("post_quant", "pre_quant"):
            raise ConfigError("style_target must be 'post_quant' or 'pre_quant'")
        if isinstance(self.freeze, str):
            self.freeze = [s for s in self.freeze.replace(",", " ").split() if s]
        if self.ablation == "no_style_extractor":
            self.alpha = 0.0
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.stage == "tts":
            self.freeze = sorted(set(self.freeze) | set(TEACHERS))
        if self.stage == "style_extractor":
            self.freeze = sorted(set(self.freeze) | {"text_style"})


CONFIG_CLASSES = (FeatureConfig, TextStyleConfig, ExtractorConfig, AcousticConfig, StageConfig)


def load_flat(path: Optional[str | Path]) -> dict:
    """Read a flat YAML mapping; ``None`` means all defaults."""
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: key {key!r} is nested; config keys must be flat")
    return data


def check_keys(flat: dict) -> None:
    known = set()
    for cls in CONFIG_CLASSES:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")


def build(cls, flat: dict, **overrides):
    """Instantiate ``cls`` from the subset of ``flat`` naming its fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in flat.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items() if k in names})
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(cls, data: dict):
    """Rebuild a config echoed into a checkpoint (ignores foreign keys)."""
    return build(cls, data)


def config_hash(obj: Any) -> str:
    """sha256 of the canonical JSON form; stable under key reordering."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
