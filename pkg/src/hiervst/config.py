"""Configuration dataclasses and the two presets (full scale, desk scale).

A config file is a single YAML document with one section per block:
``audio``, ``perturb``, ``content``, ``model``, ``train``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    n_fft: int = 1280
    win_length: int = 1280
    hop_length: int = 320
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_hop: int = 80
    f0_range: tuple = (50.0, 600.0)
    voicing_threshold: float = 0.3

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def f0_ratio(self) -> int:
        return self.hop_length // self.f0_hop

    def validate(self):
        if self.hop_length % self.f0_hop:
            raise ConfigError(f"hop_length {self.hop_length} is not a multiple of f0_hop {self.f0_hop}")
        if self.win_length > self.n_fft:
            raise ConfigError("win_length must not exceed n_fft")
        lo, hi = self.f0_range
        if not 0 < lo < hi < self.sample_rate / 2:
            raise ConfigError(f"bad f0_range {self.f0_range}")


@dataclass
class PerturbConfig:
    formant_shift_range: tuple = (1 / 1.4, 1.4)
    pitch_shift_range: tuple = (0.5, 2.0)
    peq_bands: int = 8
    peq_gain_range: tuple = (-12.0, 12.0)
    peq_q_range: tuple = (2.0, 5.0)
    peq_center_range: tuple = (60.0, 7000.0)
    rng_seed: int = 0

    def validate(self):
        if self.peq_bands < 1:
            raise ConfigError("peq_bands must be >= 1")
        for name in ("formant_shift_range", "pitch_shift_range", "peq_q_range", "peq_center_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be a positive interval, got {(lo, hi)}")
        for name in ("formant_shift_range", "pitch_shift_range"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi:
                raise ConfigError(f"{name} must contain the neutral ratio 1.0")
        lo, hi = self.peq_gain_range
        if not lo <= 0.0 <= hi:
            raise ConfigError("peq_gain_range must contain 0 dB")

    @classmethod
    def neutral(cls, peq_bands: int = 1) -> "PerturbConfig":
        return cls(formant_shift_range=(1.0, 1.0), pitch_shift_range=(1.0, 1.0),
                   peq_bands=peq_bands, peq_gain_range=(0.0, 0.0))


@dataclass
class ContentConfig:
    backend: str = "stub"
    feature_dim: int = 1024
    seed: int = 1234
    layer: int | None = None
    command: list | None = None
    timeout: float = 600.0
    retries: int = 2


@dataclass
class ModelConfig:
    latent_dim: int = 192
    hidden: int = 192
    enc_layers: int = 16
    enc_kernel: int = 5
    enc_dilation_rate: int = 1
    flow_couplings: int = 4
    flow_wn_layers: int = 4
    flow_kernel: int = 5
    style_dim: int = 256
    style_hidden: int = 128
    style_conv_channels: int = 32
    style_heads: int = 4
    style_pooling: str = "attentive"
    prosody_bins: int = 20
    prosody_hidden: int = 768
    prosody_layers: int = 2
    prosody_heads: int = 2
    prosody_filter: int = 1024
    prosody_kernel: int = 9
    dropout: float = 0.0
    gen_channels: int = 512
    upsample_rates: tuple = (4, 5, 4, 2, 2)
    resblock_kernels: tuple = (3, 7, 11)
    resblock_dilations: tuple = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    source_channels: int = 256
    source_upsample_rates: tuple = (2, 2)
    source_resblock_kernels: tuple = (3, 7, 11)
    source_resblock_dilations: tuple = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    mpd_periods: tuple = (2, 3, 5, 7, 11)
    mpd_channels: tuple = (32, 128, 512, 1024, 1024)
    msstft_windows: tuple = (2048, 1024, 512, 256, 128)
    msstft_channels: int = 32
    use_mpd: bool = True

    def validate(self, audio: AudioConfig | None = None):
        audio = audio or AudioConfig()
        if self.latent_dim % 2:
            raise ConfigError(f"latent_dim must be even for coupling flows, got {self.latent_dim}")
        if math.prod(self.upsample_rates) != audio.hop_length:
            raise ConfigError(
                f"waveform upsample product {math.prod(self.upsample_rates)} != hop {audio.hop_length}")
        if math.prod(self.source_upsample_rates) != audio.f0_ratio:
            raise ConfigError(
                f"source upsample product {math.prod(self.source_upsample_rates)} != "
                f"hop ratio {audio.f0_ratio}")
        if self.upsample_rates[0] != audio.f0_ratio:
            raise ConfigError("first waveform upsample stage must reach the F0 frame rate")
        if len(self.resblock_kernels) != len(self.resblock_dilations):
            raise ConfigError("resblock_kernels / resblock_dilations length mismatch")
        if self.style_pooling not in ("attentive", "mean"):
            raise ConfigError(f"unknown style_pooling {self.style_pooling!r}")
        if self.prosody_hidden % self.prosody_heads:
            raise ConfigError("prosody_hidden must be divisible by prosody_heads")


@dataclass
class LossWeights:
    stft: float = 45.0
    pitch: float = 10.0
    kl_linguistic: float = 1.0
    kl_acoustic: float = 1.0
    prosody: float = 1.0
    adv: float = 1.0
    feat_match: float = 2.0


@dataclass
class TrainConfig:
    batch_size: int = 128
    total_steps: int = 600_000
    segment_samples: int = 61_440
    window_samples: int = 9_600
    learning_rate: float = 2e-4
    betas: tuple = (0.8, 0.99)
    weight_decay: float = 0.01
    lr_decay: float = 0.999
    grad_clip: float | None = None
    p_uncond: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 1234
    checkpoint_interval: int = 10_000
    log_interval: int = 100
    perturb_cache: int = 0
    finetune_steps: int = 1000
    finetune_lr: float = 1e-4

    def validate(self, audio: AudioConfig | None = None):
        hop = (audio or AudioConfig()).hop_length
        if self.window_samples % hop:
            raise ConfigError(f"window_samples {self.window_samples} not divisible by hop {hop}")
        if self.segment_samples % hop:
            raise ConfigError(f"segment_samples {self.segment_samples} not divisible by hop {hop}")
        if self.window_samples > self.segment_samples:
            raise ConfigError("window_samples exceeds segment_samples")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")


@dataclass
class HierVSTConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    content: ContentConfig = field(default_factory=ContentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "HierVSTConfig":
        self.audio.validate()
        self.perturb.validate()
        self.model.validate(self.audio)
        self.train.validate(self.audio)
        if self.train.window_samples < max(self.model.msstft_windows):
            raise ConfigError("window_samples shorter than the largest MS-STFT window")
        return self

    @classmethod
    def full(cls) -> "HierVSTConfig":
        return cls().validate()

    @classmethod
    def desk(cls) -> "HierVSTConfig":
        """Small CPU-trainable model with the full model's audio geometry."""
        model = ModelConfig(
            latent_dim=16, hidden=32, enc_layers=4, enc_kernel=5,
            flow_couplings=4, flow_wn_layers=2,
            style_dim=64, style_hidden=64, style_conv_channels=8, style_heads=2,
            prosody_hidden=64, prosody_layers=2, prosody_heads=2, prosody_filter=128, prosody_kernel=5,
            gen_channels=64, resblock_kernels=(3, 7), resblock_dilations=((1, 3), (1, 3)),
            source_channels=32, source_resblock_kernels=(3,), source_resblock_dilations=((1, 3),),
            mpd_channels=(4, 8, 16, 16, 16), msstft_channels=4,
        )
        train = TrainConfig(batch_size=4, total_steps=20_000, segment_samples=12_800,
                            window_samples=3_200, checkpoint_interval=2_000, log_interval=50,
                            perturb_cache=8)
        content = ContentConfig(feature_dim=64)
        return cls(model=model, train=train, content=content).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: "HierVSTConfig | None" = None) -> "HierVSTConfig":
        cfg = base if base is not None else cls()
        sections = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name, values in data.items():
            section = getattr(cfg, name)
            setattr(cfg, name, _merge(section, values or {}, name))
        return cfg.validate()

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=False))

    @classmethod
    def load(cls, path, preset: str = "full") -> "HierVSTConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        base = cls.desk() if preset == "desk" else cls.full()
        if "preset" in data:
            base = cls.desk() if data.pop("preset") == "desk" else cls.full()
        return cls.from_dict(data, base)


def _merge(section, values: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(section)}
    updates = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            val = _merge(current, val, f"{where}.{key}")
        elif isinstance(current, tuple) and isinstance(val, list):
            val = _tuplify(val)
        updates[key] = val
    return dataclasses.replace(section, **updates)


def _tuplify(val):
    if isinstance(val, list):
        return tuple(_tuplify(v) for v in val)
    return val


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
