"""Hierarchical adaptive generator.

The source generator lifts the acoustic latent from the 50 Hz acoustic
grid to the 200 Hz F0 grid and produces the pitch representation ``p_h``
together with an auxiliary log-F0 prediction. The waveform generator is a
HiFi-GAN style upsampler that receives ``p_h`` through a 1x1 conv right
after its first stage, where both streams share the 200 Hz rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import weight_norm

from .audio import mel_from_audio
from .config import AudioConfig
from .errors import ConfigError, ValidationError
from .layers import LRELU_SLOPE, MRF, init_weights, upsample_layer


@dataclass
class PitchRepresentation:
    p_h: torch.Tensor      # [B, C, f0_frames]
    f0_pred: torch.Tensor  # [B, f0_frames]


@dataclass
class GeneratorOutput:
    waveform: torch.Tensor  # [B, frames * hop]
    pitch: PitchRepresentation
    used_null_style: torch.Tensor  # [B] bool


@dataclass
class UncondConfig:
    p_uncond: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValidationError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")


class SourceGenerator(nn.Module):
    def __init__(self, latent_dim, channels, upsample_rates, kernels, dilations, style_dim):
        super().__init__()
        self.latent_dim = latent_dim
        self.upsample_rates = tuple(upsample_rates)
        self.pre = weight_norm(nn.Conv1d(latent_dim, channels, 7, padding=3))
        self.ups = nn.ModuleList()
        self.conds = nn.ModuleList([nn.Linear(style_dim, channels)])
        self.blocks = nn.ModuleList()
        ch = channels
        for rate in upsample_rates:
            self.ups.append(upsample_layer(ch, ch // 2, rate))
            ch //= 2
            self.conds.append(nn.Linear(style_dim, ch))
            self.blocks.append(MRF(ch, kernels, dilations))
        self.out_channels = ch
        self.ups.apply(init_weights)
        self.f0_head = nn.Sequential(
            nn.Conv1d(ch, ch, 3, padding=1), nn.LeakyReLU(LRELU_SLOPE), nn.Conv1d(ch, 1, 3, padding=1))

    def forward(self, z_a, s) -> PitchRepresentation:
        if z_a.size(1) != self.latent_dim:
            raise ValidationError(f"source generator expects {self.latent_dim} channels, got {z_a.size(1)}")
        x = self.pre(z_a) + self.conds[0](s)[..., None]
        for up, cond, block in zip(self.ups, self.conds[1:], self.blocks):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            x = block(x + cond(s)[..., None])
        return PitchRepresentation(x, self.f0_head(x)[:, 0])


class WaveformGenerator(nn.Module):
    def __init__(self, latent_dim, channels, upsample_rates, kernels, dilations, style_dim, pitch_channels):
        super().__init__()
        self.upsample_rates = tuple(upsample_rates)
        self.pre = weight_norm(nn.Conv1d(latent_dim, channels, 7, padding=3))
        self.conds = nn.ModuleList([nn.Linear(style_dim, channels)])
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = channels
        for i, rate in enumerate(upsample_rates):
            self.ups.append(upsample_layer(ch, ch // 2, rate))
            ch //= 2
            self.conds.append(nn.Linear(style_dim, ch))
            self.blocks.append(MRF(ch, kernels, dilations))
            if i == 0:
                self.pitch_cond = nn.Conv1d(pitch_channels, ch, 1)
        self.post = weight_norm(nn.Conv1d(ch, 1, 7, padding=3))
        self.ups.apply(init_weights)
        self.post.apply(init_weights)

    def forward(self, z_a, p_h, s):
        if p_h.size(-1) != z_a.size(-1) * self.upsample_rates[0]:
            raise ValidationError(
                f"p_h has {p_h.size(-1)} steps, expected {z_a.size(-1) * self.upsample_rates[0]}")
        x = self.pre(z_a) + self.conds[0](s)[..., None]
        for i, (up, cond, block) in enumerate(zip(self.ups, self.conds[1:], self.blocks)):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            if i == 0:
                x = x + self.pitch_cond(p_h)
            x = block(x + cond(s)[..., None])
        x = self.post(F.leaky_relu(x))
        return torch.tanh(x)[:, 0]


class HAG(nn.Module):
    def __init__(self, cfg, audio: AudioConfig, style_dim):
        super().__init__()
        if math.prod(cfg.upsample_rates) != audio.hop_length:
            raise ConfigError("waveform upsample rates must multiply to the hop length")
        if math.prod(cfg.source_upsample_rates) != audio.f0_ratio:
            raise ConfigError("source upsample rates must multiply to hop / f0_hop")
        self.hop = audio.hop_length
        self.source = SourceGenerator(cfg.latent_dim, cfg.source_channels, cfg.source_upsample_rates,
                                      cfg.source_resblock_kernels, cfg.source_resblock_dilations, style_dim)
        self.waveform = WaveformGenerator(cfg.latent_dim, cfg.gen_channels, cfg.upsample_rates,
                                          cfg.resblock_kernels, cfg.resblock_dilations, style_dim,
                                          self.source.out_channels)

    def source_generate(self, z_a, s) -> PitchRepresentation:
        return self.source(z_a, s)

    def waveform_generate(self, z_a, pitch: PitchRepresentation, s):
        return self.waveform(z_a, pitch.p_h, s)

    def substitute_style(self, s, null, p_uncond, generator=None):
        """Replace each row of ``s`` by ``null`` with probability ``p_uncond`` (training only)."""
        if not self.training or p_uncond <= 0:
            return s, torch.zeros(s.size(0), dtype=torch.bool, device=s.device)
        draws = torch.rand(s.size(0), generator=generator, dtype=torch.float64)
        use_null = (draws < p_uncond).to(s.device)
        return torch.where(use_null[:, None], null.expand_as(s), s), use_null

    def forward(self, z_a, s, null, p_uncond=0.0, generator=None) -> GeneratorOutput:
        s_eff, used = self.substitute_style(s, null, p_uncond, generator)
        pitch = self.source_generate(z_a, s_eff)
        wav = self.waveform_generate(z_a, pitch, s_eff)
        return GeneratorOutput(wav, pitch, used)


def generate(hag: HAG, z_a, s, null, cfg: UncondConfig, generator=None) -> GeneratorOutput:
    return hag(z_a, s, null, cfg.p_uncond, generator)


def pitch_loss(f0_pred, log_f0, mask=None):
    """Mean |p_x - f0_pred| over all frames, unvoiced targets included."""
    if f0_pred.shape != log_f0.shape:
        raise ValidationError(f"f0 prediction {tuple(f0_pred.shape)} vs target {tuple(log_f0.shape)}")
    err = torch.abs(log_f0 - f0_pred)
    if mask is None:
        return err.mean()
    return (err * mask).sum() / mask.sum().clamp(min=1)


def stft_recon_loss(x, x_hat, audio: AudioConfig = AudioConfig(), eps=1e-9):
    """Mean L1 between log-mels of reference and generated audio."""
    if x.shape != x_hat.shape:
        raise ValidationError(f"reference {tuple(x.shape)} vs generated {tuple(x_hat.shape)}")
    return torch.mean(torch.abs(mel_from_audio(x, audio, eps) - mel_from_audio(x_hat, audio, eps)))
