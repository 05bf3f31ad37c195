"""Manifests, zero-shot conversion and objective evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from scipy.io import wavfile

from .audio import Waveform, extract_f0, load_and_resample, mel_spectrogram
from .content import extract, make_extractor
from .errors import AudioReadError, BackendError, ValidationError
from .perturbation import perturb
from .trainer import Trainer, load_checkpoint

log = logging.getLogger(__name__)

MAX_TEMPERATURE = 1.5


@dataclass
class ManifestRecord:
    utt_id: str
    path: str
    speaker_id: str | None = None
    duration: float = 0.0


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        ids = [r.utt_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValidationError("manifest utt_ids are not unique")

    def __len__(self):
        return len(self.records)

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"records": [asdict(r) for r in self.records], "skipped": self.skipped}, indent=2))

    @classmethod
    def load(cls, path) -> "Manifest":
        data = json.loads(Path(path).read_text())
        return cls([ManifestRecord(**r) for r in data["records"]], data.get("skipped", []))

    def speakers(self) -> list:
        return sorted({r.speaker_id for r in self.records if r.speaker_id is not None})


def _probe_duration(path: Path) -> float:
    rate, data = wavfile.read(str(path), mmap=True)
    n = data.shape[0]
    del data
    if n == 0:
        raise ValidationError("no samples")
    return n / rate


def build_manifest(root_dir, pattern: str = "**/*.wav") -> Manifest:
    """Scan ``root_dir`` in lexicographic path order; unreadable files go to ``skipped``."""
    root = Path(root_dir)
    records, skipped = [], []
    for path in sorted(p for p in root.glob(pattern) if p.is_file()):
        rel = path.relative_to(root)
        try:
            duration = _probe_duration(path)
        except (ValueError, OSError, EOFError) as exc:
            skipped.append({"path": str(path), "reason": str(exc) or type(exc).__name__})
            continue
        speaker = rel.parts[0] if len(rel.parts) > 1 else None
        records.append(ManifestRecord(rel.with_suffix("").as_posix(), str(path), speaker, duration))
    return Manifest(records, skipped)


@dataclass
class ConversionRequest:
    source_path: str
    target_path: str
    temperature_l: float = 0.667
    temperature_a: float = 0.667
    seed: int = 0
    extra_refs: tuple = ()

    def __post_init__(self):
        for name in ("temperature_l", "temperature_a"):
            t = getattr(self, name)
            if not 0.0 <= t <= MAX_TEMPERATURE:
                raise ValidationError(f"{name} must lie in [0, {MAX_TEMPERATURE}], got {t}")


class Converter:
    """Zero-shot conversion with a trained model.

    The style vector always comes from the target reference(s); the source
    only contributes perturbed content features.
    """

    def __init__(self, state: Trainer, extractor=None):
        self.state = state
        self.cfg = state.cfg
        self.model = state.model
        self.dtype = state.dtype
        self.extractor = extractor or make_extractor(self.cfg.content)

    def style_vector(self, refs: list[Waveform]) -> torch.Tensor:
        vecs = []
        for w in refs:
            mel = torch.from_numpy(mel_spectrogram(w, self.cfg.audio).values).to(self.dtype)
            vecs.append(self.model.style_of(mel[None]))
        return torch.stack(vecs).mean(0)

    def convert_waveforms(self, source: Waveform, target, temperature_l=0.667, temperature_a=0.667,
                          seed: int = 0) -> Waveform:
        refs = target if isinstance(target, (list, tuple)) else [target]
        self.model.eval()
        s = self.style_vector(refs)
        rng = np.random.default_rng(seed)
        hop = self.cfg.audio.hop_length
        n = len(source) // hop
        if n < 1:
            raise ValidationError("source shorter than one frame")
        src = Waveform(source.samples[:n * hop], source.sample_rate)
        pert = perturb(src, self.cfg.perturb, rng)
        c = torch.from_numpy(extract(pert, self.extractor).values.T.copy()).to(self.dtype)[None]
        gen = torch.Generator().manual_seed(seed)
        out = self.model.synthesize(c, s, temperature_l=temperature_l, temperature_a=temperature_a,
                                    generator=gen)
        return Waveform(out.waveform[0].double().numpy().astype(np.float32), self.cfg.audio.sample_rate)

    def convert(self, req: ConversionRequest) -> Waveform:
        sr = self.cfg.audio.sample_rate
        source = load_and_resample(req.source_path, sr)
        refs = [load_and_resample(p, sr) for p in (req.target_path, *req.extra_refs)]
        return self.convert_waveforms(source, refs, req.temperature_l, req.temperature_a, req.seed)


def convert(req: ConversionRequest, ckpt, extractor=None) -> Waveform:
    state = ckpt if isinstance(ckpt, Trainer) else load_checkpoint(ckpt)
    return Converter(state, extractor).convert(req)


class ASRBackend(Protocol):
    def transcribe(self, w: Waveform) -> str: ...


class VerificationBackend(Protocol):
    def embed(self, w: Waveform) -> np.ndarray: ...


class NullBackend:
    """Placeholder for an unconfigured external backend."""

    available = False

    def transcribe(self, w):
        raise BackendError("no ASR backend configured")

    def embed(self, w):
        raise BackendError("no verification backend configured")


def edit_distance(ref, hyp) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def error_rate(ref, hyp) -> float:
    return edit_distance(ref, hyp) / max(1, len(ref))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def mel_distance(a: Waveform, b: Waveform, cfg) -> float:
    ma = mel_spectrogram(a, cfg).values
    mb = mel_spectrogram(b, cfg).values
    n = min(ma.shape[1], mb.shape[1])
    return float(np.mean(np.abs(ma[:, :n] - mb[:, :n])))


def f0_correlation(a: Waveform, b: Waveform, cfg) -> float | None:
    pa = extract_f0(a, cfg)
    pb = extract_f0(b, cfg)
    n = min(len(pa.log_f0), len(pb.log_f0))
    both = pa.voiced_mask[:n] & pb.voiced_mask[:n]
    if both.sum() < 2:
        return None
    x = pa.log_f0[:n][both].astype(np.float64)
    y = pb.log_f0[:n][both].astype(np.float64)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


def evaluate(pairs, converter: Converter, asr=None, verifier=None) -> dict:
    """Metrics for ``(converted, target, source)`` waveform triplets.

    Metrics whose backend is missing are reported as ``None`` and listed
    under ``unavailable``.
    """
    cfg = converter.cfg.audio
    rows = []
    unavailable = set()
    for i, (conv, target, source) in enumerate(pairs):
        s_conv = converter.style_vector([conv]).numpy()
        s_tgt = converter.style_vector([target]).numpy()
        s_src = converter.style_vector([source]).numpy()
        row = {
            "index": i,
            "style_cos_target": cosine(s_conv, s_tgt),
            "style_cos_source": cosine(s_conv, s_src),
            "mel_distance_source": mel_distance(conv, source, cfg),
            "f0_correlation_source": f0_correlation(conv, source, cfg),
            "cer": None, "wer": None, "secs_external": None,
        }
        if asr is not None and getattr(asr, "available", True):
            ref, hyp = asr.transcribe(source), asr.transcribe(conv)
            row["cer"] = error_rate(list(ref), list(hyp))
            row["wer"] = error_rate(ref.split(), hyp.split())
        else:
            unavailable.update({"cer", "wer"})
        if verifier is not None and getattr(verifier, "available", True):
            row["secs_external"] = cosine(verifier.embed(conv), verifier.embed(target))
        else:
            unavailable.add("secs_external")
        rows.append(row)

    aggregate = {}
    for key in ("style_cos_target", "style_cos_source", "mel_distance_source", "f0_correlation_source",
                "cer", "wer", "secs_external"):
        vals = [r[key] for r in rows if r[key] is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    wins = [r["style_cos_target"] > r["style_cos_source"] for r in rows]
    aggregate["target_closer_rate"] = float(np.mean(wins)) if wins else None
    aggregate["n_pairs"] = len(rows)
    return {"pairs": rows, "aggregate": aggregate, "unavailable": sorted(unavailable)}


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, indent=2))


def pairs_from_manifest(manifest: Manifest, max_pairs: int | None = None) -> list:
    """Each utterance paired with the first utterance of the next speaker (cyclic)."""
    speakers = manifest.speakers()
    if len(speakers) < 2:
        raise ValidationError("pairing needs at least two speakers in the manifest")
    first = {}
    for r in manifest.records:
        first.setdefault(r.speaker_id, r)
    pairs = []
    for r in manifest.records:
        if r.speaker_id is None:
            continue
        nxt = speakers[(speakers.index(r.speaker_id) + 1) % len(speakers)]
        pairs.append((r, first[nxt]))
        if max_pairs and len(pairs) >= max_pairs:
            break
    return pairs


def evaluate_manifest(manifest: Manifest, state: Trainer, max_pairs=None, seed=0, asr=None, verifier=None):
    converter = Converter(state)
    sr = state.cfg.audio.sample_rate
    triplets, ids = [], []
    for src_rec, tgt_rec in pairs_from_manifest(manifest, max_pairs):
        try:
            source = load_and_resample(src_rec.path, sr)
            target = load_and_resample(tgt_rec.path, sr)
        except (AudioReadError, ValidationError) as exc:
            log.warning("skipping pair %s -> %s: %s", src_rec.utt_id, tgt_rec.utt_id, exc)
            continue
        conv = converter.convert_waveforms(source, target, seed=seed)
        triplets.append((conv, target, source))
        ids.append((src_rec.utt_id, tgt_rec.utt_id))
    report = evaluate(triplets, converter, asr, verifier)
    for row, (s, t) in zip(report["pairs"], ids):
        row["source"] = s
        row["target"] = t
    return report
