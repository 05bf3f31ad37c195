"""Audio I/O and deterministic feature extraction.

Frame geometry at the reference settings: one acoustic frame per 320
samples (linear spectrogram, mel, content features) and one F0 frame per
80 samples, so every stream is aligned to the same 50 Hz grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile
from scipy.signal import resample_poly

from .config import AudioConfig
from .errors import AudioReadError, ValidationError

DEFAULT_AUDIO = AudioConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValidationError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValidationError("waveform is empty")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # [bins, frames]
    hop: int = 320
    window: int = 1280


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_mels, frames], natural-log compressed
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0


@dataclass
class PitchTrack:
    log_f0: np.ndarray
    voiced_mask: np.ndarray
    hop: int = 80

    @property
    def f0(self) -> np.ndarray:
        return np.where(self.voiced_mask, np.exp(self.log_f0), 0.0)


@dataclass
class FeatureBundle:
    """Aligned per-utterance features, channel-first.

    ``wav`` [frames*hop], ``spec`` [bins, frames], ``mel`` [n_mels, frames],
    ``w2v`` / ``w2v_pert`` [feature_dim, frames], ``log_f0`` [frames*f0_ratio].
    """
    wav: np.ndarray
    spec: np.ndarray
    mel: np.ndarray
    w2v: np.ndarray
    w2v_pert: np.ndarray
    log_f0: np.ndarray
    utt_id: str = ""
    hop: int = 320
    f0_hop: int = 80
    extras: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.spec.shape[-1]

    def check_alignment(self):
        n = self.n_frames
        ratio = self.hop // self.f0_hop
        shapes = {"mel": self.mel.shape[-1], "w2v": self.w2v.shape[-1],
                  "w2v_pert": self.w2v_pert.shape[-1]}
        for name, frames in shapes.items():
            if frames != n:
                raise ValidationError(f"{name} has {frames} frames, spec has {n}")
        if self.log_f0.shape[-1] != n * ratio:
            raise ValidationError(f"log_f0 has {self.log_f0.shape[-1]} frames, expected {n * ratio}")
        if self.wav.shape[-1] != n * self.hop:
            raise ValidationError(f"wav has {self.wav.shape[-1]} samples, expected {n * self.hop}")
        return self


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    return data.astype(np.float32)


def read_wav(path) -> Waveform:
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError as exc:
        raise AudioReadError(f"no such audio file: {path}") from exc
    except (ValueError, OSError, EOFError) as exc:
        raise AudioReadError(f"cannot decode {path}: {exc}") from exc
    data = _pcm_to_float(np.asarray(data))
    if data.ndim == 2:
        data = data.mean(axis=1, dtype=np.float64).astype(np.float32)
    if data.size == 0:
        raise ValidationError(f"{path} contains no samples")
    return Waveform(data, int(rate))


def resample(w: Waveform, target_rate: int) -> Waveform:
    if w.sample_rate == target_rate:
        return w
    frac = Fraction(target_rate, w.sample_rate)
    out = resample_poly(w.samples.astype(np.float64), frac.numerator, frac.denominator)
    return Waveform(out.astype(np.float32), target_rate)


def load_and_resample(path, target_rate: int = 16000) -> Waveform:
    return resample(read_wav(path), target_rate)


def save_wav(path, w: Waveform):
    """Write 16-bit PCM."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, pcm)


def _check_rate(w: Waveform, cfg: AudioConfig):
    if w.sample_rate != cfg.sample_rate:
        raise ValidationError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    if len(w) < cfg.win_length:
        raise ValidationError(f"waveform of {len(w)} samples is shorter than one window ({cfg.win_length})")


def _hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-style triangular filterbank with area normalization, [n_mels, n_fft//2+1]."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    mel_pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_pts[2:n_mels + 2] - mel_pts[:n_mels]))[:, None]
    weights.setflags(write=False)
    return weights


def stft_magnitude(audio: torch.Tensor, cfg: AudioConfig = DEFAULT_AUDIO, eps: float = 0.0) -> torch.Tensor:
    """Magnitude STFT of ``audio`` [..., T] -> [..., bins, T // hop].

    Reflect padding of (n_fft - hop) / 2 on both sides gives exactly
    floor(T / hop) frames. ``eps`` > 0 smooths the magnitude at zero for
    use inside differentiable losses.
    """
    shape = audio.shape[:-1]
    x = audio.reshape(-1, 1, audio.shape[-1])
    pad = (cfg.n_fft - cfg.hop_length) // 2
    x = F.pad(x, (pad, pad), mode="reflect").squeeze(1)
    window = torch.hann_window(cfg.win_length, dtype=audio.dtype, device=audio.device)
    spec = torch.stft(x, cfg.n_fft, hop_length=cfg.hop_length, win_length=cfg.win_length,
                      window=window, center=False, return_complex=True)
    if eps > 0:
        mag = torch.sqrt(spec.real.pow(2) + spec.imag.pow(2) + eps)
    else:
        mag = spec.abs()
    return mag.reshape(*shape, *mag.shape[-2:])


def mel_from_audio(audio: torch.Tensor, cfg: AudioConfig = DEFAULT_AUDIO, eps: float = 0.0) -> torch.Tensor:
    """Log-mel of ``audio`` [..., T] -> [..., n_mels, T // hop]."""
    mag = stft_magnitude(audio, cfg, eps)
    fb = torch.tensor(mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax),
                         dtype=mag.dtype, device=mag.device)
    mel = torch.matmul(fb, mag)
    return torch.log(torch.clamp(mel, min=cfg.log_floor))


def linear_spectrogram(w: Waveform, cfg: AudioConfig = DEFAULT_AUDIO) -> Spectrogram:
    _check_rate(w, cfg)
    mag = stft_magnitude(torch.from_numpy(w.samples), cfg)
    return Spectrogram(mag.numpy(), hop=cfg.hop_length, window=cfg.win_length)


def mel_spectrogram(w: Waveform, cfg: AudioConfig = DEFAULT_AUDIO) -> MelSpectrogram:
    _check_rate(w, cfg)
    mel = mel_from_audio(torch.from_numpy(w.samples), cfg)
    return MelSpectrogram(mel.numpy(), n_mels=cfg.n_mels, fmin=cfg.fmin, fmax=cfg.fmax)


def extract_f0(w: Waveform, cfg: AudioConfig = DEFAULT_AUDIO) -> PitchTrack:
    """Normalized cross-correlation pitch tracker at ``cfg.f0_hop``.

    Each frame correlates a window of one longest period (sr / fmin) with
    lagged copies; the voicing decision thresholds the best correlation.
    Among near-best peaks the shortest lag wins, which suppresses
    period-doubling errors.
    """
    if w.sample_rate != cfg.sample_rate:
        raise ValidationError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    sr = cfg.sample_rate
    fmin, fmax = cfg.f0_range
    hop = cfg.f0_hop
    win = int(math.ceil(sr / fmin))
    min_lag = max(2, int(math.floor(sr / fmax)))
    max_lag = int(math.ceil(sr / fmin))
    if len(w) < win:
        raise ValidationError(f"waveform of {len(w)} samples is shorter than the F0 window ({win})")

    x = w.samples.astype(np.float64)
    # pitch frames tile the acoustic grid exactly: f0_ratio per acoustic frame
    n_frames = (len(x) // cfg.hop_length) * cfg.f0_ratio
    seg = win + max_lag + 1
    left = seg // 2 - hop // 2
    padded = np.concatenate([np.zeros(left), x, np.zeros(seg)])
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, seg)[starts]  # [N, seg]

    nfft = 1 << int(math.ceil(math.log2(seg + win)))
    head = np.zeros_like(frames)
    head[:, :win] = frames[:, :win]
    corr = np.fft.irfft(np.conj(np.fft.rfft(head, nfft)) * np.fft.rfft(frames, nfft), nfft)[:, :max_lag + 2]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    e0 = sq[:, win]
    lags = np.arange(max_lag + 2)
    ek = sq[:, lags + win] - sq[:, lags]
    denom = np.sqrt(np.maximum(e0[:, None] * ek, 0.0))
    energy_floor = 1e-10 * win
    valid = denom > energy_floor
    nccf = np.where(valid, corr / np.where(valid, denom, 1.0), 0.0)

    search = nccf[:, min_lag:max_lag + 1]
    left_n = nccf[:, min_lag - 1:max_lag]
    right_n = nccf[:, min_lag + 1:max_lag + 2]
    is_peak = (search >= left_n) & (search > right_n)
    best = np.max(np.where(is_peak, search, -np.inf), axis=1)
    best = np.where(np.isfinite(best), best, 0.0)
    candidates = is_peak & (search >= 0.9 * best[:, None]) & (search > 0)
    has = candidates.any(axis=1)
    first = np.argmax(candidates, axis=1)
    lag = first + min_lag
    rows = np.arange(n_frames)
    c0 = nccf[rows, lag - 1]
    c1 = nccf[rows, lag]
    c2 = nccf[rows, np.minimum(lag + 1, max_lag + 1)]
    curv = c0 - 2 * c1 + c2
    shift = np.where(np.abs(curv) > 1e-12, 0.5 * (c0 - c2) / np.where(np.abs(curv) > 1e-12, curv, 1.0), 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    f0 = sr / (lag + shift)

    voiced = has & (c1 >= cfg.voicing_threshold) & (e0 > energy_floor)
    log_f0 = np.where(voiced, np.log(np.clip(f0, fmin, fmax)), 0.0)
    return PitchTrack(log_f0.astype(np.float32), voiced, hop=hop)


def slice_aligned(bundle: FeatureBundle, start: int, n_frames: int) -> FeatureBundle:
    if start < 0 or n_frames <= 0 or start + n_frames > bundle.n_frames:
        raise ValidationError(
            f"slice [{start}, {start + n_frames}) outside bundle of {bundle.n_frames} frames")
    hop = bundle.hop
    ratio = bundle.hop // bundle.f0_hop
    sl = slice(start, start + n_frames)
    return replace(
        bundle,
        wav=bundle.wav[start * hop:(start + n_frames) * hop],
        spec=bundle.spec[:, sl],
        mel=bundle.mel[:, sl],
        w2v=bundle.w2v[:, sl],
        w2v_pert=bundle.w2v_pert[:, sl],
        log_f0=bundle.log_f0[start * ratio:(start + n_frames) * ratio],
        extras=dict(bundle.extras),
    )
