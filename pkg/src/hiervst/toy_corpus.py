"""Synthetic multi-speaker "speech" for desk-scale experiments.

Each speaker has a characteristic F0 range, vocal-tract length (formant
scale) and glottal brightness. Utterances are random syllable strings:
a vowel with a formant trajectory, optional fricative noise, and short
pauses, with a smooth intonation contour on top.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .audio import Waveform

VOWELS = {
    "a": (730, 1090, 2440),
    "i": (270, 2290, 3010),
    "u": (300, 870, 2240),
    "e": (530, 1840, 2480),
    "o": (570, 840, 2410),
}
BANDWIDTHS = (80.0, 110.0, 160.0)


@dataclass
class ToySpeaker:
    name: str
    f0: float
    tract_scale: float
    tilt: float

    @classmethod
    def random(cls, name, rng: np.random.Generator):
        return cls(name, float(rng.uniform(90, 260)), float(rng.uniform(0.85, 1.2)), float(rng.uniform(0.6, 0.97)))


DEFAULT_SPEAKERS = (
    ToySpeaker("spk0", 105.0, 0.88, 0.95),
    ToySpeaker("spk1", 220.0, 1.15, 0.75),
    ToySpeaker("spk2", 150.0, 1.00, 0.90),
    ToySpeaker("spk3", 250.0, 1.10, 0.65),
    ToySpeaker("spk4", 125.0, 0.93, 0.85),
)


def _resonate(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    return lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], x)


def _glottal(f0_track, sr, tilt):
    phase = np.cumsum(f0_track / sr)
    saw = 2 * (phase - np.floor(phase)) - 1
    return lfilter([1.0], [1.0, -tilt], np.diff(saw, prepend=saw[0]) * -1.0)


def synthesize_utterance(speaker: ToySpeaker, rng: np.random.Generator, n_syllables=None, sr=16000) -> Waveform:
    n_syllables = n_syllables or int(rng.integers(4, 9))
    pieces = [np.zeros(int(sr * rng.uniform(0.03, 0.08)))]
    contour_start = rng.uniform(0.9, 1.15)
    contour_end = rng.uniform(0.8, 1.05)
    total = n_syllables
    for k in range(n_syllables):
        vowel = VOWELS[rng.choice(list(VOWELS))]
        dur = int(sr * rng.uniform(0.12, 0.25))
        frac = k / max(1, total - 1)
        base = speaker.f0 * (contour_start + (contour_end - contour_start) * frac)
        t = np.arange(dur) / sr
        f0 = base * (1 + 0.04 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
        src = _glottal(f0, sr, speaker.tilt)
        out = np.zeros(dur)
        for (fmt, bw) in zip(vowel, BANDWIDTHS):
            out += _resonate(src, fmt * speaker.tract_scale, bw, sr)
        ramp = np.minimum(1.0, np.minimum(np.arange(dur), np.arange(dur)[::-1]) / (0.015 * sr))
        out *= ramp
        if rng.random() < 0.5:
            nlen = int(sr * rng.uniform(0.04, 0.08))
            noise = rng.standard_normal(nlen)
            noise = _resonate(noise, rng.uniform(3500, 6000) * speaker.tract_scale, 900.0, sr)
            noise *= np.hanning(nlen) * 0.3
            pieces.append(noise / (np.abs(noise).max() + 1e-9) * 0.15)
        pieces.append(out / (np.abs(out).max() + 1e-9) * 0.5)
        if rng.random() < 0.3:
            pieces.append(np.zeros(int(sr * rng.uniform(0.03, 0.1))))
    pieces.append(np.zeros(int(sr * rng.uniform(0.03, 0.08))))
    x = np.concatenate(pieces)
    x += 1e-3 * rng.standard_normal(x.size)
    x = 0.8 * x / np.abs(x).max()
    return Waveform(x.astype(np.float32), sr)


def make_corpus(speakers=DEFAULT_SPEAKERS, utts_per_speaker=20, seed=0, sr=16000):
    """Return a list of ``(speaker_name, utt_id, Waveform)``."""
    out = []
    for si, spk in enumerate(speakers):
        rng = np.random.default_rng([seed, si])
        for u in range(utts_per_speaker):
            out.append((spk.name, f"{spk.name}_{u:03d}", synthesize_utterance(spk, rng, sr=sr)))
    return out
