"""
Front end walk-through
======================

From one synthetic utterance to every feature the model trains on.
"""

import numpy as np

from hiervst.audio import extract_f0, linear_spectrogram, mel_spectrogram
from hiervst.config import HierVSTConfig, PerturbConfig
from hiervst.content import stub_extract
from hiervst.perturbation import perturb, sample_parameters
from hiervst.toy_corpus import DEFAULT_SPEAKERS, make_corpus

cfg = HierVSTConfig.desk()

# two toy speakers, one utterance each
corpus = make_corpus(DEFAULT_SPEAKERS[:2], utts_per_speaker=1, seed=0)
for spk, utt, w in corpus:
    print(f"{utt}: {len(w) / w.sample_rate:.2f} s")

spk, utt, w = corpus[0]

# acoustic grid: one frame per 320 samples
spec = linear_spectrogram(w, cfg.audio).values
mel = mel_spectrogram(w, cfg.audio).values
print("linear", spec.shape, "mel", mel.shape, "mel range", mel.min().round(2), mel.max().round(2))

# F0 runs four times faster than the acoustic frames
track = extract_f0(w, cfg.audio)
print("f0 frames", len(track.log_f0), "=", 4, "x", spec.shape[1])
print("voiced %.0f%%, median f0 %.1f Hz" % (100 * track.voiced_mask.mean(), np.median(track.f0[track.voiced_mask])))

# content features on the same grid
feats = stub_extract(w, feature_dim=cfg.content.feature_dim)
print("content", feats.values.shape)

# speaker perturbation: random formant / pitch / EQ
rng = np.random.default_rng(3)
print("a parameter draw:", {k: v for k, v in sample_parameters(PerturbConfig(), rng).items() if k != "peq"})
pert = perturb(w, cfg.perturb, np.random.default_rng(3))
pt = extract_f0(pert, cfg.audio)
print("perturbed median f0 %.1f Hz" % np.median(pt.f0[pt.voiced_mask]))

# same timing, but the random-projection stub is not speaker-invariant like a real SSL model,
# so the perturbed copy looks quite different to it
a = stub_extract(w, feature_dim=64).values
b = stub_extract(pert, feature_dim=64).values
cos = np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
print("frame-wise content cosine, original vs perturbed: mean %.3f" % cos.mean())

# neutral parameters leave audio untouched
same = perturb(w, PerturbConfig.neutral(peq_bands=8), rng)
print("neutral perturbation max deviation %.1e" % np.abs(same.samples - w.samples).max())
