"""Global style encoder over mel spectrograms, plus the learned null style."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError

MIN_FRAMES = 8


@dataclass
class StyleVector:
    values: torch.Tensor  # [style_dim] or [B, style_dim]
    origin: str = "encoded"


class AttentiveStatsPooling(nn.Module):
    """Multi-head attentive mean/std pooling over time, mask-aware."""

    def __init__(self, channels, n_heads=4, attn_hidden=64):
        super().__init__()
        self.n_heads = n_heads
        self.attn = nn.Sequential(
            nn.Conv1d(channels, attn_hidden, 1), nn.Tanh(), nn.Conv1d(attn_hidden, n_heads, 1))

    @property
    def out_multiplier(self):
        return 2 * self.n_heads

    def forward(self, x, mask):
        # x [B, C, T], mask [B, 1, T]
        logits = self.attn(x).masked_fill(mask == 0, float("-inf"))
        alpha = torch.softmax(logits, dim=-1)  # [B, H, T]
        mean = torch.einsum("bht,bct->bhc", alpha, x)
        sq = torch.einsum("bht,bct->bhc", alpha, x * x)
        std = torch.sqrt(torch.clamp(sq - mean * mean, min=1e-6))
        return torch.cat([mean, std], dim=1).flatten(1)


class MeanPooling(nn.Module):
    out_multiplier = 1

    def forward(self, x, mask):
        return (x * mask).sum(-1) / mask.sum(-1).clamp(min=1)


class StyleEncoder(nn.Module):
    """Spectral conv stack over each frame's mel bins, then temporal pooling.

    Both convolutions run along the frequency axis only, so frame-level
    features never mix time steps and the pooled vector depends on the set
    of frames, not their order.
    """

    def __init__(self, n_mels=80, conv_channels=32, hidden=128, style_dim=256, n_heads=4,
                 pooling="attentive"):
        super().__init__()
        self.style_dim = style_dim
        self.conv1 = nn.Conv2d(1, conv_channels, (5, 1), stride=(2, 1), padding=(2, 0))
        self.conv2 = nn.Conv2d(conv_channels, conv_channels, (5, 1), stride=(2, 1), padding=(2, 0))
        freq = (n_mels + 1) // 2
        freq = (freq + 1) // 2
        self.frame_proj = nn.Conv1d(conv_channels * freq, hidden, 1)
        if pooling == "attentive":
            self.pool = AttentiveStatsPooling(hidden, n_heads)
        else:
            self.pool = MeanPooling()
        self.head = nn.Linear(hidden * self.pool.out_multiplier, style_dim)
        self.null = nn.Parameter(torch.zeros(style_dim))

    def forward(self, mel, mask=None):
        """mel [B, n_mels, T] -> style [B, style_dim]."""
        if mel.dim() == 2:
            mel = mel[None]
        if mask is None:
            mask = torch.ones(mel.size(0), 1, mel.size(-1), dtype=mel.dtype, device=mel.device)
        if mask.sum(-1).min() < MIN_FRAMES:
            raise ValidationError(f"style encoder needs at least {MIN_FRAMES} frames")
        h = F.leaky_relu(self.conv1(mel[:, None]), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        b, c, f, t = h.shape
        h = F.leaky_relu(self.frame_proj(h.reshape(b, c * f, t)), 0.2) * mask
        return self.head(self.pool(h, mask))

    def null_embedding(self) -> torch.Tensor:
        return self.null


def encode_style(encoder: StyleEncoder, mel, mask=None) -> StyleVector:
    mel = torch.as_tensor(mel, dtype=encoder.null.dtype)
    return StyleVector(encoder(mel, mask), "encoded")


def null_embedding(encoder: StyleEncoder) -> StyleVector:
    return StyleVector(encoder.null_embedding(), "null")
