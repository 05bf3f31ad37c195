"""Generator-side model: style encoder, hierarchical VAE and HAG wired together."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import HierVSTConfig
from .hag import HAG, GeneratorOutput, pitch_loss, stft_recon_loss
from .hvae import HierarchicalVAE
from .layers import slice_segments
from .style import StyleEncoder


@dataclass
class Batch:
    wav: torch.Tensor       # [B, T]
    spec: torch.Tensor      # [B, bins, F]
    mel: torch.Tensor       # [B, n_mels, F]
    w2v: torch.Tensor       # [B, D, F]
    w2v_pert: torch.Tensor  # [B, D, F]
    log_f0: torch.Tensor    # [B, F * f0_ratio]
    lengths: torch.Tensor   # [B] acoustic frames
    mask: torch.Tensor      # [B, 1, F]

    def to(self, dtype=None, device=None):
        def conv(t):
            return t.to(device=device, dtype=dtype) if t.is_floating_point() else t.to(device=device)
        return Batch(*(conv(getattr(self, f)) for f in self.__dataclass_fields__))


@dataclass
class GeneratorStep:
    losses: dict
    wav_slice: torch.Tensor
    output: GeneratorOutput
    style: torch.Tensor


class HierVST(nn.Module):
    def __init__(self, cfg: HierVSTConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m = cfg.model
        self.audio = cfg.audio
        self.style_encoder = StyleEncoder(cfg.audio.n_mels, m.style_conv_channels, m.style_hidden,
                                          m.style_dim, m.style_heads, m.style_pooling)
        self.hvae = HierarchicalVAE(cfg.content.feature_dim, cfg.audio.n_bins, m, gin_channels=m.style_dim)
        self.hag = HAG(m, cfg.audio, m.style_dim)

    @property
    def null_style(self):
        return self.style_encoder.null

    def generator_forward(self, batch: Batch, starts: torch.Tensor, window_frames: int,
                          p_uncond: float = 0.0, generator=None) -> GeneratorStep:
        """Full-segment encoders, windowed generator; returns generator-side losses."""
        hop = self.audio.hop_length
        ratio = self.audio.f0_ratio
        s = self.style_encoder(batch.mel, batch.mask)
        losses, q_l, q_a = self.hvae(batch.w2v, batch.w2v_pert, batch.spec, batch.mel, batch.mask, s, generator)
        z_slice = slice_segments(q_a.z, starts, window_frames)
        out = self.hag(z_slice, s, self.null_style, p_uncond, generator)
        wav_slice = slice_segments(batch.wav[:, None], starts * hop, window_frames * hop)[:, 0]
        f0_slice = slice_segments(batch.log_f0[:, None], starts * ratio, window_frames * ratio)[:, 0]
        losses["stft"] = stft_recon_loss(wav_slice, out.waveform, self.audio)
        losses["pitch"] = pitch_loss(out.pitch.f0_pred, f0_slice)
        return GeneratorStep(losses, wav_slice, out, s)

    @torch.no_grad()
    def style_of(self, mel, mask=None):
        return self.style_encoder(mel, mask)

    @torch.no_grad()
    def synthesize(self, w2v_pert, s, mask=None, temperature_l=0.667, temperature_a=0.667, generator=None):
        """Conversion chain: restorer prior -> f_l^-1 -> acoustic prior -> f_a^-1 -> HAG with ``s``."""
        if mask is None:
            mask = torch.ones(w2v_pert.size(0), 1, w2v_pert.size(-1), dtype=w2v_pert.dtype)
        _, z_a = self.hvae.sample_acoustic(w2v_pert, mask, s, temperature_l, temperature_a, generator)
        was_training = self.hag.training
        self.hag.eval()
        try:
            out = self.hag(z_a, s, self.null_style, 0.0)
        finally:
            self.hag.train(was_training)
        return out
