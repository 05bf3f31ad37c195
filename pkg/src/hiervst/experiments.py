"""Toy-scale training recipes shared by the demos and the slow acceptance checks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform
from .config import HierVSTConfig
from .content import make_extractor
from .data import TrainingData
from .pipeline import Converter, cosine
from .toy_corpus import DEFAULT_SPEAKERS, make_corpus
from .trainer import Trainer, fine_tune_one_shot, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values, got {len(v)}")
    return np.convolve(v, np.ones(window) / window, mode="valid")


@dataclass
class OverfitResult:
    stft: list
    pitch: list
    stft_start: float
    stft_end: float
    pitch_start: float
    pitch_end: float

    @property
    def stft_drop(self) -> float:
        return 1.0 - self.stft_end / self.stft_start

    @property
    def pitch_drop(self) -> float:
        return 1.0 - self.pitch_end / self.pitch_start


def tiny_overfit(steps: int = 2000, n_utts: int = 2, seed: int = 0, cfg: HierVSTConfig | None = None,
                 log_path=None, window: int = 10) -> OverfitResult:
    """Train the desk model on ``n_utts`` utterances and report loss drops.

    The start value is the moving average ending at step ``window``; the end
    value is the moving average over the last ``window`` steps.
    """
    cfg = cfg or HierVSTConfig.desk()
    corpus = make_corpus(DEFAULT_SPEAKERS[:n_utts], utts_per_speaker=1, seed=seed)
    waves = [w for _, _, w in corpus]
    trainer = Trainer(cfg)
    data = TrainingData(waves, cfg, make_extractor(cfg.content))
    hist = trainer.fit(data, steps, log_path=log_path)
    stft = [h.stft for h in hist]
    pitch = [h.pitch for h in hist]
    ms, mp = moving_average(stft, window), moving_average(pitch, window)
    return OverfitResult(stft, pitch, float(ms[0]), float(ms[-1]), float(mp[0]), float(mp[-1]))


@dataclass
class ZeroShotSetup:
    train_speakers: tuple = tuple(s.name for s in DEFAULT_SPEAKERS[:4])
    held_out: str = DEFAULT_SPEAKERS[4].name
    utts_per_speaker: int = 20
    steps: int = 20_000
    seed: int = 0
    trials: int = 20
    temperature: float = 0.667
    extra: dict = field(default_factory=dict)


def toy_corpus_split(setup: ZeroShotSetup):
    corpus = make_corpus(DEFAULT_SPEAKERS, setup.utts_per_speaker, seed=setup.seed)
    train = [(s, u, w) for s, u, w in corpus if s in setup.train_speakers]
    held = [(s, u, w) for s, u, w in corpus if s == setup.held_out]
    return train, held


def train_zero_shot(setup: ZeroShotSetup, out_dir, cfg: HierVSTConfig | None = None) -> Trainer:
    """Train (or resume from ``out_dir/latest.pt``) up to ``setup.steps``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "latest.pt"
    if latest.exists():
        trainer = load_checkpoint(latest)
    else:
        trainer = Trainer(cfg or HierVSTConfig.desk())
    remaining = setup.steps - trainer.step
    if remaining > 0:
        train, _ = toy_corpus_split(setup)
        data = TrainingData([w for _, _, w in train], trainer.cfg, make_extractor(trainer.cfg.content),
                            utt_ids=[u for _, u, _ in train])
        trainer.fit(data, remaining, out_dir=out_dir, log_path=out_dir / "metrics.jsonl")
        save_checkpoint(trainer, latest)
    return trainer


def zero_shot_trials(trainer: Trainer, setup: ZeroShotSetup) -> list[dict]:
    """Held-out source -> training-speaker target, one trial per held-out utterance."""
    train, held = toy_corpus_split(setup)
    by_spk = {}
    for s, u, w in train:
        by_spk.setdefault(s, []).append((u, w))
    conv = Converter(trainer)
    rng = np.random.default_rng(setup.seed + 1)
    rows = []
    for k in range(setup.trials):
        _, src_id, src = held[k % len(held)]
        spk = setup.train_speakers[k % len(setup.train_speakers)]
        tgt_id, tgt = by_spk[spk][int(rng.integers(len(by_spk[spk])))]
        out = conv.convert_waveforms(src, tgt, setup.temperature, setup.temperature, seed=k)
        rows.append(_style_row(conv, out, tgt, src, src_id, tgt_id))
    return rows


def _style_row(conv: Converter, out: Waveform, tgt: Waveform, src: Waveform, src_id, tgt_id) -> dict:
    s_out = conv.style_vector([out]).numpy()
    return {
        "source": src_id, "target": tgt_id,
        "cos_target": cosine(s_out, conv.style_vector([tgt]).numpy()),
        "cos_source": cosine(s_out, conv.style_vector([src]).numpy()),
    }


def one_shot_comparison(trainer: Trainer, setup: ZeroShotSetup, steps: int = 1000, lr: float = 1e-4,
                        n_eval: int = 10):
    """Fine-tune on one held-out utterance, then convert training-speaker sources to it.

    Returns ``(zero_shot_rows, one_shot_rows)`` evaluated on the same pairs.
    """
    train, held = toy_corpus_split(setup)
    _, ref_id, ref = held[0]
    tuned = fine_tune_one_shot(trainer, ref, make_extractor(trainer.cfg.content), steps=steps, lr=lr)
    # both models are scored by the zero-shot style encoder so the yardstick stays fixed
    judge = Converter(trainer)
    rows = {}
    for name, state in (("zero", trainer), ("one", tuned)):
        conv = Converter(state)
        rows[name] = []
        for k in range(n_eval):
            _, src_id, src = train[(k * 7) % len(train)]
            out = conv.convert_waveforms(src, ref, setup.temperature, setup.temperature, seed=k)
            rows[name].append(_style_row(judge, out, ref, src, src_id, ref_id))
    return rows["zero"], rows["one"]


def summarize(rows: list[dict]) -> dict:
    wins = [r["cos_target"] > r["cos_source"] for r in rows]
    return {
        "n": len(rows),
        "win_rate": float(np.mean(wins)),
        "mean_cos_target": float(np.mean([r["cos_target"] for r in rows])),
        "mean_cos_source": float(np.mean([r["cos_source"] for r in rows])),
    }


def dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2))
