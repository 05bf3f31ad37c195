"""Hierarchical VAE: linguistic restorer prior, linguistic and acoustic
posteriors, two mean-only coupling flows, acoustic prior and the prosody
decoder.

Latent tensors are channel-first, ``[B, latent_dim, frames]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, NumericalError, ValidationError
from .layers import WN

LOG_STD_MIN = -9.0
LOG_STD_MAX = 2.0


@dataclass
class GaussianParams:
    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValidationError(f"mean {tuple(self.mean.shape)} vs log_std {tuple(self.log_std.shape)}")

    def sample(self, noise: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
        return self.mean + torch.exp(self.log_std) * noise * temperature


@dataclass
class LatentState:
    z: torch.Tensor
    params: GaussianParams
    noise: torch.Tensor
    flowed: torch.Tensor | None = None


def _noise_like(x, generator):
    return torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)


class LatentEncoder(nn.Module):
    """Conv projection -> WaveNet stack -> diagonal Gaussian parameters."""

    def __init__(self, in_channels, latent_dim, hidden, kernel_size, dilation_rate, n_layers,
                 gin_channels, p_dropout=0.0):
        super().__init__()
        self.in_channels = in_channels
        self.latent_dim = latent_dim
        self.n_layers = n_layers
        self.hidden = hidden
        self.pre = nn.Conv1d(in_channels, hidden, 1)
        self.enc = WN(hidden, kernel_size, dilation_rate, n_layers, gin_channels, p_dropout)
        self.proj = nn.Conv1d(hidden, 2 * latent_dim, 1)

    def forward(self, x, x_mask, g) -> GaussianParams:
        if x.size(-1) == 0:
            raise ValidationError("zero-length input")
        if x.size(1) != self.in_channels:
            raise ValidationError(f"expected {self.in_channels} input channels, got {x.size(1)}")
        h = self.pre(x) * x_mask
        h = self.enc(h, x_mask, g=g[..., None])
        stats = self.proj(h) * x_mask
        mean, log_std = stats.chunk(2, dim=1)
        return GaussianParams(mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX) * x_mask)


class MeanOnlyCoupling(nn.Module):
    """Additive coupling: the second half is shifted by a function of the first."""

    def __init__(self, channels, hidden, kernel_size, n_layers, gin_channels):
        super().__init__()
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.enc = WN(hidden, kernel_size, 1, n_layers, gin_channels)
        self.post = nn.Conv1d(hidden, self.half, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def shift(self, x0, x_mask, g):
        h = self.pre(x0) * x_mask
        h = self.enc(h, x_mask, g=g)
        return self.post(h) * x_mask

    def forward(self, x, x_mask, g, reverse=False):
        x0, x1 = x[:, :self.half], x[:, self.half:]
        m = self.shift(x0, x_mask, g)
        x1 = x1 - m if reverse else x1 + m
        out = torch.cat([x0, x1 * x_mask], dim=1)
        log_det = torch.zeros(x.size(0), dtype=x.dtype, device=x.device)
        return out, log_det


class CouplingFlow(nn.Module):
    """Stack of mean-only couplings, each followed by a channel flip."""

    def __init__(self, channels, hidden, kernel_size, n_layers, n_couplings, gin_channels):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"coupling flow needs an even latent_dim, got {channels}")
        self.channels = channels
        self.couplings = nn.ModuleList([
            MeanOnlyCoupling(channels, hidden, kernel_size, n_layers, gin_channels)
            for _ in range(n_couplings)])

    def forward(self, z, z_mask, g, reverse=False):
        if z.size(1) != self.channels:
            raise ValidationError(f"flow expects {self.channels} channels, got {z.size(1)}")
        g = g[..., None]
        if not reverse:
            for layer in self.couplings:
                z, _ = layer(z, z_mask, g)
                z = torch.flip(z, [1])
        else:
            for layer in reversed(self.couplings):
                z = torch.flip(z, [1])
                z, _ = layer(z, z_mask, g, reverse=True)
        return z

    def log_det(self, z, z_mask, g):
        total = torch.zeros(z.size(0), dtype=z.dtype, device=z.device)
        g = g[..., None]
        for layer in self.couplings:
            z, ld = layer(z, z_mask, g)
            total = total + ld
            z = torch.flip(z, [1])
        return total


class FFTBlock(nn.Module):
    """Self-attention plus conv feed-forward, post-norm."""

    def __init__(self, hidden, n_heads, filter_channels, kernel_size, p_dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden, n_heads, dropout=p_dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv1 = nn.Conv1d(hidden, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_channels, hidden, 1)
        self.norm2 = nn.LayerNorm(hidden)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, x_mask):
        # x [B, T, H], x_mask [B, T] bool
        attn, _ = self.attn(x, x, x, key_padding_mask=~x_mask, need_weights=False)
        x = self.norm1(x + self.drop(attn))
        h = x.transpose(1, 2) * x_mask[:, None]
        h = self.conv2(F.relu(self.conv1(h))).transpose(1, 2)
        x = self.norm2(x + self.drop(h))
        return x * x_mask[..., None]


class ProsodyDecoder(nn.Module):
    def __init__(self, latent_dim, hidden, n_layers, n_heads, filter_channels, kernel_size,
                 out_bins=20, p_dropout=0.0):
        super().__init__()
        self.out_bins = out_bins
        self.n_layers = n_layers
        self.hidden = hidden
        self.pre = nn.Linear(latent_dim, hidden)
        self.blocks = nn.ModuleList([
            FFTBlock(hidden, n_heads, filter_channels, kernel_size, p_dropout) for _ in range(n_layers)])
        self.proj = nn.Linear(hidden, out_bins)

    def forward(self, z_l, z_mask):
        """z_l [B, latent, T] -> [B, out_bins, T]."""
        mask = z_mask[:, 0] > 0
        h = self.pre(z_l.transpose(1, 2))
        for block in self.blocks:
            h = block(h, mask)
        return self.proj(h).transpose(1, 2) * z_mask


def masked_mean(x, mask):
    mask = mask.expand_as(x)
    return (x * mask).sum() / mask.sum().clamp(min=1)


def kl_term(posterior: LatentState, prior: GaussianParams, mask=None) -> torch.Tensor:
    """Single-sample estimate of log q(z) - log p(f(z)), averaged over the mask.

    The flows are volume preserving, so no Jacobian term enters. The
    Gaussian normalizers cancel and are omitted.
    """
    if posterior.flowed is None:
        raise ValidationError("posterior has no flowed sample; apply the flow first")
    q = posterior.params
    if posterior.flowed.shape != prior.mean.shape or posterior.z.shape != q.mean.shape:
        raise ValidationError("posterior / prior shape mismatch")
    if mask is None:
        mask = torch.ones_like(posterior.z[:, :1])
    log_q = -q.log_std - 0.5 * ((posterior.z - q.mean) * torch.exp(-q.log_std)) ** 2
    log_p = -prior.log_std - 0.5 * ((posterior.flowed - prior.mean) * torch.exp(-prior.log_std)) ** 2
    return masked_mean(log_q - log_p, mask)


def gaussian_kl_closed_form(mq, sq, mp, sp):
    """KL(N(mq, sq^2) || N(mp, sp^2)), elementwise."""
    return torch.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2 * sp ** 2) - 0.5


def prosody_loss(pred, mel, mask=None, bins=20):
    target = mel[:, :bins]
    if pred.shape != target.shape:
        raise ValidationError(f"prosody prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mask is None:
        mask = torch.ones_like(target[:, :1])
    return masked_mean(torch.abs(pred - target), mask)


class HierarchicalVAE(nn.Module):
    def __init__(self, content_dim, spec_bins, cfg, gin_channels):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        enc = dict(latent_dim=cfg.latent_dim, hidden=cfg.hidden, kernel_size=cfg.enc_kernel,
                   dilation_rate=cfg.enc_dilation_rate, n_layers=cfg.enc_layers,
                   gin_channels=gin_channels, p_dropout=cfg.dropout)
        self.restorer = LatentEncoder(content_dim, **enc)
        self.linguistic_encoder = LatentEncoder(content_dim, **enc)
        self.acoustic_encoder = LatentEncoder(spec_bins, **enc)
        self.acoustic_prior_net = LatentEncoder(cfg.latent_dim, **enc)
        flow = dict(channels=cfg.latent_dim, hidden=cfg.hidden, kernel_size=cfg.flow_kernel,
                    n_layers=cfg.flow_wn_layers, n_couplings=cfg.flow_couplings, gin_channels=gin_channels)
        self.flow_l = CouplingFlow(**flow)
        self.flow_a = CouplingFlow(**flow)
        self.prosody = ProsodyDecoder(cfg.latent_dim, cfg.prosody_hidden, cfg.prosody_layers,
                                      cfg.prosody_heads, cfg.prosody_filter, cfg.prosody_kernel,
                                      cfg.prosody_bins, cfg.dropout)

    def flow(self, which):
        return {"f_l": self.flow_l, "f_a": self.flow_a}[which]

    def restorer_prior(self, c, mask, s) -> GaussianParams:
        return self.restorer(c, mask, s)

    def linguistic_posterior(self, x_w2v, mask, s, generator=None, noise=None) -> LatentState:
        params = self.linguistic_encoder(x_w2v, mask, s)
        noise = _noise_like(params.mean, generator) if noise is None else noise
        return LatentState(params.sample(noise) * mask, params, noise)

    def acoustic_posterior(self, x_spec, mask, s, generator=None, noise=None) -> LatentState:
        params = self.acoustic_encoder(x_spec, mask, s)
        noise = _noise_like(params.mean, generator) if noise is None else noise
        return LatentState(params.sample(noise) * mask, params, noise)

    def acoustic_prior(self, z_l, mask, s) -> GaussianParams:
        return self.acoustic_prior_net(z_l, mask, s)

    def flow_apply(self, z, mask, s, which="f_l", reverse=False):
        return self.flow(which)(z, mask, s, reverse=reverse)

    def forward(self, w2v, w2v_pert, spec, mel, mask, s, generator=None):
        """Training pass. Returns (losses, z_l_state, z_a_state)."""
        prior_l = self.restorer_prior(w2v_pert, mask, s)
        q_l = self.linguistic_posterior(w2v, mask, s, generator)
        q_l.flowed = self.flow_l(q_l.z, mask, s)
        q_a = self.acoustic_posterior(spec, mask, s, generator)
        q_a.flowed = self.flow_a(q_a.z, mask, s)
        prior_a = self.acoustic_prior(q_l.z, mask, s)
        pros = self.prosody(q_l.z, mask)
        losses = {
            "kl_linguistic": kl_term(q_l, prior_l, mask),
            "kl_acoustic": kl_term(q_a, prior_a, mask),
            "prosody": prosody_loss(pros, mel, mask, self.prosody.out_bins),
        }
        bad = {k: float(v.detach()) for k, v in losses.items() if not torch.isfinite(v)}
        if bad:
            raise NumericalError(f"non-finite HVAE losses: {bad}", {k: float(v.detach()) for k, v in losses.items()})
        return losses, q_l, q_a

    @torch.no_grad()
    def sample_acoustic(self, w2v_pert, mask, s, temperature_l=0.667, temperature_a=0.667, generator=None):
        """Generative chain c -> z_l -> z_a used at conversion time."""
        prior_l = self.restorer_prior(w2v_pert, mask, s)
        z_l = prior_l.sample(_noise_like(prior_l.mean, generator), temperature_l) * mask
        z_l = self.flow_l(z_l, mask, s, reverse=True)
        prior_a = self.acoustic_prior(z_l, mask, s)
        z_a = prior_a.sample(_noise_like(prior_a.mean, generator), temperature_a) * mask
        z_a = self.flow_a(z_a, mask, s, reverse=True)
        return z_l, z_a
