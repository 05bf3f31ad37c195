"""Feature bundles, training-segment sampling and batch collation."""
from __future__ import annotations

import numpy as np
import torch

from .audio import FeatureBundle, Waveform, extract_f0, linear_spectrogram, mel_spectrogram, slice_aligned
from .config import HierVSTConfig
from .content import extract
from .model import Batch
from .perturbation import perturb


def loop_pad(w: Waveform, min_samples: int) -> Waveform:
    if len(w) >= min_samples:
        return w
    reps = -(-min_samples // len(w))
    return Waveform(np.tile(w.samples, reps)[:min_samples], w.sample_rate)


def build_bundle(w: Waveform, cfg: HierVSTConfig, extractor, rng: np.random.Generator | None = None,
                 utt_id: str = "", pert_wave: Waveform | None = None) -> FeatureBundle:
    """Extract every aligned stream from ``w`` (trimmed to whole frames)."""
    hop = cfg.audio.hop_length
    n = len(w) // hop
    w = Waveform(w.samples[:n * hop], w.sample_rate)
    if pert_wave is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.perturb.rng_seed)
        pert_wave = perturb(w, cfg.perturb, rng)
    pitch = extract_f0(w, cfg.audio)
    bundle = FeatureBundle(
        wav=w.samples,
        spec=linear_spectrogram(w, cfg.audio).values,
        mel=mel_spectrogram(w, cfg.audio).values,
        w2v=extract(w, extractor).values.T.copy(),
        w2v_pert=extract(pert_wave, extractor).values.T.copy(),
        log_f0=pitch.log_f0,
        utt_id=utt_id,
        hop=hop,
        f0_hop=cfg.audio.f0_hop,
    )
    return bundle.check_alignment()


def collate(bundles: list[FeatureBundle], dtype=torch.float32) -> Batch:
    """Zero-pad to the longest bundle; ``mask`` marks valid acoustic frames."""
    lengths = torch.tensor([b.n_frames for b in bundles], dtype=torch.long)
    n = int(lengths.max())
    hop = bundles[0].hop
    ratio = hop // bundles[0].f0_hop

    def stack(name, scale=1):
        arrs = [getattr(b, name) for b in bundles]
        width = n * scale
        out = np.zeros((len(arrs),) + arrs[0].shape[:-1] + (width,), dtype=np.float64)
        for i, a in enumerate(arrs):
            out[i, ..., :a.shape[-1]] = a
        return torch.from_numpy(out).to(dtype)

    mask = (torch.arange(n)[None, :] < lengths[:, None]).to(dtype)[:, None]
    return Batch(stack("wav", hop), stack("spec"), stack("mel"), stack("w2v"), stack("w2v_pert"),
                 stack("log_f0", ratio), lengths, mask)


class TrainingData:
    """Utterance pool that yields fixed-length training segments.

    Base features are computed once per utterance. Perturbed content
    features are recomputed on every draw unless ``perturb_cache`` > 0, in
    which case that many perturbed variants are precomputed per utterance.
    """

    def __init__(self, waves: list[Waveform], cfg: HierVSTConfig, extractor, perturb_cache: int | None = None,
                 utt_ids: list[str] | None = None):
        self.cfg = cfg
        self.extractor = extractor
        self.segment_frames = cfg.train.segment_samples // cfg.audio.hop_length
        self.perturb_cache = cfg.train.perturb_cache if perturb_cache is None else perturb_cache
        self.waves = [loop_pad(w, cfg.train.segment_samples) for w in waves]
        self.utt_ids = utt_ids or [f"utt{i:05d}" for i in range(len(waves))]
        self.bundles = []
        self.variants = []
        for i, w in enumerate(self.waves):
            rng = np.random.default_rng([cfg.perturb.rng_seed, i])
            bundle = build_bundle(w, cfg, extractor, rng, self.utt_ids[i])
            self.bundles.append(bundle)
            cached = [bundle.w2v_pert]
            for _ in range(max(0, self.perturb_cache - 1)):
                cached.append(self._perturbed_features(i, rng))
            self.variants.append(cached)

    def __len__(self):
        return len(self.waves)

    def _perturbed_features(self, i, rng):
        hop = self.cfg.audio.hop_length
        w = self.waves[i]
        w = Waveform(w.samples[:len(w) // hop * hop], w.sample_rate)
        return extract(perturb(w, self.cfg.perturb, rng), self.extractor).values.T.copy()

    def draw(self, rng: np.random.Generator) -> FeatureBundle:
        i = int(rng.integers(len(self.bundles)))
        bundle = self.bundles[i]
        if self.perturb_cache > 0:
            pert = self.variants[i][int(rng.integers(len(self.variants[i])))]
        else:
            pert = self._perturbed_features(i, rng)
        start = int(rng.integers(bundle.n_frames - self.segment_frames + 1))
        full = FeatureBundle(bundle.wav, bundle.spec, bundle.mel, bundle.w2v, pert, bundle.log_f0,
                             bundle.utt_id, bundle.hop, bundle.f0_hop)
        return slice_aligned(full, start, self.segment_frames)

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[FeatureBundle]:
        return [self.draw(rng) for _ in range(batch_size)]
