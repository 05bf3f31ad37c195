"""Multi-period and multi-scale complex-STFT discriminators with LSGAN losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import weight_norm

from .errors import ValidationError
from .layers import LRELU_SLOPE, get_padding


@dataclass
class DiscriminatorOutput:
    scores: list = field(default_factory=list)    # one score map per sub-discriminator
    features: list = field(default_factory=list)  # per sub-discriminator: list of feature maps

    def __add__(self, other):
        return DiscriminatorOutput(self.scores + other.scores, self.features + other.features)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels=(32, 128, 512, 1024, 1024), kernel_size=5, stride=3):
        super().__init__()
        self.period = period
        chans = (1,) + tuple(channels)
        self.convs = nn.ModuleList()
        for i in range(len(channels)):
            s = stride if i < len(channels) - 1 else 1
            self.convs.append(weight_norm(nn.Conv2d(chans[i], chans[i + 1], (kernel_size, 1), (s, 1),
                                                    padding=(get_padding(kernel_size), 0))))
        self.post = weight_norm(nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        # x [B, T]; zero-pad to a multiple of the period, then fold
        b, t = x.shape
        if t % self.period:
            x = F.pad(x, (0, self.period - t % self.period))
        x = x.view(b, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return torch.flatten(x, 1, -1), feats


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, periods=(2, 3, 5, 7, 11), channels=(32, 128, 512, 1024, 1024)):
        super().__init__()
        self.periods = tuple(periods)
        self.discriminators = nn.ModuleList([PeriodDiscriminator(p, channels) for p in periods])

    def forward(self, audio) -> DiscriminatorOutput:
        if audio.dim() == 1:
            audio = audio[None]
        if audio.size(-1) == 0:
            raise ValidationError("empty audio")
        out = DiscriminatorOutput()
        for d in self.discriminators:
            score, feats = d(audio)
            out.scores.append(score)
            out.features.append(feats)
        return out


class STFTDiscriminator(nn.Module):
    """Conv2d stack over stacked real/imaginary STFT planes.

    Layout is [B, 2, time, freq]; strides shrink frequency, dilations widen time.
    """

    def __init__(self, n_fft, channels=32, hop_length=None):
        super().__init__()
        self.n_fft = n_fft
        self.hop_length = hop_length or n_fft // 4
        c = channels
        self.convs = nn.ModuleList([
            weight_norm(nn.Conv2d(2, c, (3, 9), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(1, 1), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(2, 1), padding=(2, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), dilation=(4, 1), padding=(4, 4))),
            weight_norm(nn.Conv2d(c, c, (3, 3), padding=(1, 1))),
        ])
        self.post = weight_norm(nn.Conv2d(c, 1, (3, 3), padding=(1, 1)))

    def spectrum(self, x):
        window = torch.hann_window(self.n_fft, dtype=x.dtype, device=x.device)
        spec = torch.stft(x, self.n_fft, self.hop_length, self.n_fft, window=window,
                          center=True, return_complex=True)
        # [B, 2, time, freq]
        return torch.stack([spec.real, spec.imag], dim=1).transpose(2, 3)

    def forward(self, x):
        h = self.spectrum(x)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return torch.flatten(h, 1, -1), feats


class MultiScaleSTFTDiscriminator(nn.Module):
    def __init__(self, windows=(2048, 1024, 512, 256, 128), channels=32):
        super().__init__()
        self.windows = tuple(windows)
        self.discriminators = nn.ModuleList([STFTDiscriminator(w, channels) for w in windows])

    def forward(self, audio) -> DiscriminatorOutput:
        if audio.dim() == 1:
            audio = audio[None]
        if audio.size(-1) < max(self.windows):
            raise ValidationError(f"audio of {audio.size(-1)} samples shorter than window {max(self.windows)}")
        out = DiscriminatorOutput()
        for d in self.discriminators:
            score, feats = d(audio)
            out.scores.append(score)
            out.features.append(feats)
        return out


class Discriminator(nn.Module):
    """MPD and MS-STFTD outputs concatenated into one structure."""

    def __init__(self, cfg):
        super().__init__()
        self.mpd = MultiPeriodDiscriminator(cfg.mpd_periods, cfg.mpd_channels) if cfg.use_mpd else None
        self.msstftd = MultiScaleSTFTDiscriminator(cfg.msstft_windows, cfg.msstft_channels)

    def forward(self, audio) -> DiscriminatorOutput:
        out = self.msstftd(audio)
        if self.mpd is not None:
            out = self.mpd(audio) + out
        return out


def mpd_forward(mpd: MultiPeriodDiscriminator, audio) -> DiscriminatorOutput:
    return mpd(audio)


def msstftd_forward(msd: MultiScaleSTFTDiscriminator, audio) -> DiscriminatorOutput:
    return msd(audio)


def _check_structure(a: DiscriminatorOutput, b: DiscriminatorOutput, features=False):
    if len(a.scores) != len(b.scores):
        raise ValidationError(f"{len(a.scores)} vs {len(b.scores)} score maps")
    for x, y in zip(a.scores, b.scores):
        if x.shape != y.shape:
            raise ValidationError(f"score map shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if features:
        if len(a.features) != len(b.features):
            raise ValidationError("feature lists differ in length")
        for fa, fb in zip(a.features, b.features):
            if len(fa) != len(fb) or any(x.shape != y.shape for x, y in zip(fa, fb)):
                raise ValidationError("feature map structure differs")


def disc_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput):
    """Mean over score maps of mean((D(x) - 1)^2) + mean(D(G(z))^2)."""
    _check_structure(real, fake)
    terms = [torch.mean((r - 1) ** 2) + torch.mean(f ** 2) for r, f in zip(real.scores, fake.scores)]
    return torch.stack(terms).mean()


def gen_adv_loss(fake: DiscriminatorOutput):
    if not fake.scores:
        raise ValidationError("no score maps")
    return torch.stack([torch.mean((f - 1) ** 2) for f in fake.scores]).mean()


def feature_matching_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput):
    """Mean L1 across every feature map; real features are treated as constants."""
    _check_structure(real, fake, features=True)
    terms = [torch.mean(torch.abs(r.detach() - f))
             for fr, ff in zip(real.features, fake.features) for r, f in zip(fr, ff)]
    return torch.stack(terms).mean()
