"""Speaker perturbation: formant shift, pitch randomization, parametric EQ.

All three operations preserve length and collapse to (near-)identity at
their neutral parameters. Randomness only enters through ``perturb``,
which takes an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import istft, lfilter, resample, stft

from .audio import Waveform
from .config import PerturbConfig
from .errors import ValidationError

N_FFT = 1024
HOP = 256
RATIO_RANGE = (0.5, 2.0)


def _check_ratio(ratio: float, name: str):
    lo, hi = RATIO_RANGE
    if not (lo <= ratio <= hi) or not np.isfinite(ratio):
        raise ValidationError(f"{name} ratio {ratio} outside [{lo}, {hi}]")


def _stft(x: np.ndarray):
    _, _, spec = stft(x, nperseg=N_FFT, noverlap=N_FFT - HOP, window="hann", boundary="zeros", padded=True)
    return spec


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    _, y = istft(spec, nperseg=N_FFT, noverlap=N_FFT - HOP, window="hann", boundary=True)
    return _fix_length(y, length)


def _fix_length(y: np.ndarray, length: int) -> np.ndarray:
    if y.size >= length:
        return y[:length]
    return np.pad(y, (0, length - y.size))


def _log_envelope(mag: np.ndarray, lifter: int) -> np.ndarray:
    """Cepstrally smoothed log-magnitude envelope, per column."""
    log_mag = np.log(np.maximum(mag, 1e-8))
    ceps = np.fft.irfft(log_mag, n=N_FFT, axis=0)
    ceps[lifter:N_FFT - lifter + 1] = 0.0
    return np.fft.rfft(ceps, axis=0).real


def _warp_envelope(x: np.ndarray, ratio: float, sample_rate: int) -> np.ndarray:
    spec = _stft(x)
    mag = np.abs(spec)
    lifter = max(8, sample_rate // 500)
    env = _log_envelope(mag, lifter)
    bins = np.arange(spec.shape[0], dtype=np.float64)
    src = bins / ratio
    warped = np.empty_like(env)
    for t in range(env.shape[1]):
        warped[:, t] = np.interp(src, bins, env[:, t])
    gain = np.exp(np.clip(warped - env, -30.0, 30.0))
    return _istft(spec * gain, x.size)


def _match_rms(y: np.ndarray, ref: np.ndarray) -> np.ndarray:
    ref_rms = np.sqrt(np.mean(ref.astype(np.float64) ** 2))
    y_rms = np.sqrt(np.mean(y ** 2))
    if y_rms < 1e-12 or ref_rms < 1e-12:
        return y
    return y * (ref_rms / y_rms)


def formant_shift(w: Waveform, ratio: float) -> Waveform:
    """Warp the spectral envelope by ``ratio`` while keeping the harmonics in place."""
    _check_ratio(ratio, "formant shift")
    x = w.samples.astype(np.float64)
    y = _match_rms(_warp_envelope(x, ratio, w.sample_rate), x)
    return Waveform(y.astype(np.float32), w.sample_rate)


def _phase_vocoder(spec: np.ndarray, rate: float) -> np.ndarray:
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate, dtype=np.float64)
    padded = np.concatenate([spec, np.zeros((n_bins, 2), spec.dtype)], axis=1)
    idx = steps.astype(int)
    alpha = steps - idx
    c0 = padded[:, idx]
    c1 = padded[:, idx + 1]
    mag = (1.0 - alpha) * np.abs(c0) + alpha * np.abs(c1)
    advance = 2 * np.pi * HOP * np.arange(n_bins) / N_FFT
    dphase = np.angle(c1) - np.angle(c0) - advance[:, None]
    dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
    increments = advance[:, None] + dphase
    phase = np.angle(spec[:, :1]) + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(increments[:, :-1], axis=1)], axis=1)
    return mag * np.exp(1j * phase)


def pitch_randomize(w: Waveform, ratio: float) -> Waveform:
    """Scale F0 by ``ratio`` with duration and spectral envelope preserved.

    Time-stretch by ``ratio`` (phase vocoder), resample back to the original
    length, then undo the envelope shift the resampling introduced.
    """
    _check_ratio(ratio, "pitch")
    x = w.samples.astype(np.float64)
    n = x.size
    stretched_len = int(round(n * ratio))
    stretched = _istft(_phase_vocoder(_stft(x), 1.0 / ratio), stretched_len)
    shifted = resample(stretched, n)
    y = _warp_envelope(shifted, 1.0 / ratio, w.sample_rate)
    y = _match_rms(y, x)
    return Waveform(y.astype(np.float32), w.sample_rate)


def peaking_coefficients(center: float, gain_db: float, q: float, sample_rate: int):
    """Biquad peaking-EQ coefficients (b, a), normalized so a[0] == 1."""
    amp = 10.0 ** (gain_db / 40.0)
    w0 = 2 * np.pi * center / sample_rate
    alpha = np.sin(w0) / (2 * q)
    cos_w0 = np.cos(w0)
    b = np.array([1 + alpha * amp, -2 * cos_w0, 1 - alpha * amp])
    a = np.array([1 + alpha / amp, -2 * cos_w0, 1 - alpha / amp])
    return b / a[0], a / a[0]


def parametric_eq(w: Waveform, band_params) -> Waveform:
    nyquist = w.sample_rate / 2
    y = w.samples.astype(np.float64)
    for center, gain_db, q in band_params:
        if not 0 < center < nyquist:
            raise ValidationError(f"PEQ center {center} Hz outside (0, {nyquist})")
        if q <= 0:
            raise ValidationError(f"PEQ Q must be positive, got {q}")
        if gain_db == 0:
            continue
        b, a = peaking_coefficients(center, gain_db, q, w.sample_rate)
        y = lfilter(b, a, y)
    return Waveform(y.astype(np.float32), w.sample_rate)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def sample_parameters(cfg: PerturbConfig, rng: np.random.Generator, sample_rate: int = 16000) -> dict:
    lo_c, hi_c = cfg.peq_center_range
    hi_c = min(hi_c, 0.49 * sample_rate)
    formant = float(_log_uniform(rng, *cfg.formant_shift_range))
    pitch = float(_log_uniform(rng, *cfg.pitch_shift_range))
    centers = _log_uniform(rng, lo_c, hi_c, cfg.peq_bands)
    gains = rng.uniform(*cfg.peq_gain_range, cfg.peq_bands)
    qs = _log_uniform(rng, *cfg.peq_q_range, cfg.peq_bands)
    bands = [(float(c), float(g), float(q)) for c, g, q in zip(centers, gains, qs)]
    return {"formant_ratio": formant, "pitch_ratio": pitch, "peq": bands}


def perturb(w: Waveform, cfg: PerturbConfig, rng: np.random.Generator) -> Waveform:
    """Formant shift, then pitch randomization, then PEQ, with ratios drawn from ``cfg``."""
    cfg.validate()
    params = sample_parameters(cfg, rng, w.sample_rate)
    out = formant_shift(w, params["formant_ratio"])
    out = pitch_randomize(out, params["pitch_ratio"])
    out = parametric_eq(out, params["peq"])
    peak = float(np.max(np.abs(out.samples)))
    if peak > 0.99:
        out = Waveform(out.samples * (0.99 / peak), out.sample_rate)
    return out
