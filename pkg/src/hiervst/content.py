"""Self-supervised content features at the acoustic frame rate.

Two backends sit behind one ``extract_batch`` call: a frozen random
projection stub for desk-scale work, and an out-of-process client that
delegates to a pretrained model run by an external command.
"""
from __future__ import annotations

import struct
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .audio import Waveform, save_wav
from .errors import BackendError, ValidationError

HOP = 320
_CACHE_MAGIC = b"HVSTFEAT"
_CACHE_VERSION = 1


@dataclass
class ContentFeatures:
    values: np.ndarray  # [frames, feature_dim]
    frame_hop: int = HOP
    source: str = "stub"

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]


def align_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Truncate or edge-pad by at most one frame to land on ``n_frames``."""
    diff = values.shape[0] - n_frames
    if abs(diff) > 1:
        raise ValidationError(f"backend produced {values.shape[0]} frames, expected {n_frames} (±1)")
    if diff > 0:
        return values[:n_frames]
    if diff < 0:
        return np.concatenate([values, values[-1:]], axis=0)
    return values


class StubExtractor:
    """Deterministic strided random-projection stack, total stride 320.

    Bias-free convolutions with leaky ReLU are positively homogeneous, so the
    per-dimension normalization at the end removes any input gain exactly.
    """

    source = "stub"
    strides = (5, 4, 4, 4)

    def __init__(self, feature_dim: int = 64, seed: int = 1234, hop: int = HOP):
        if feature_dim < 8:
            raise ValidationError(f"feature_dim must be >= 8, got {feature_dim}")
        if int(np.prod(self.strides)) != hop:
            raise ValidationError(f"stub strides multiply to {np.prod(self.strides)}, not hop {hop}")
        self.feature_dim = feature_dim
        self.seed = seed
        self.hop = hop
        gen = torch.Generator().manual_seed(seed)
        weights = []
        in_ch = 1
        for stride in self.strides:
            k = 2 * stride
            w = torch.randn(feature_dim, in_ch, k, generator=gen, dtype=torch.float64) / np.sqrt(in_ch * k)
            weights.append(w)
            in_ch = feature_dim
        self._weights = tuple(weights)

    def _forward(self, samples: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            h = torch.from_numpy(samples.astype(np.float64))[None, None]
            for w, stride in zip(self._weights, self.strides):
                h = F.conv1d(h, w, stride=stride, padding=stride // 2)
                h = F.leaky_relu(h, 0.2)
            h = h[0].T.numpy()  # [frames, dim]
        mean = h.mean(axis=0, keepdims=True)
        std = h.std(axis=0, keepdims=True)
        return ((h - mean) / (std + 1e-8)).astype(np.float32)

    def extract_batch(self, waves: list[Waveform]) -> list[np.ndarray]:
        return [self._forward(w.samples) for w in waves]


class ExternalExtractor:
    """Client for an out-of-process feature extractor.

    ``command`` is invoked as ``command + ["--in-dir", D, "--out-dir", O]``
    (plus ``["--layer", L]`` when ``layer`` is set). The tool reads every
    ``<i>.wav`` in D and writes ``<i>.npy`` with shape [frames, dim] to O.
    """

    source = "external"

    def __init__(self, command: list[str], layer: int | None = None, timeout: float = 600.0,
                 retries: int = 2, hop: int = HOP):
        if not command:
            raise BackendError("external extractor needs a command")
        self.command = list(command)
        self.layer = layer
        self.timeout = timeout
        self.retries = retries
        self.hop = hop

    def _run_once(self, waves):
        with tempfile.TemporaryDirectory() as tmp:
            in_dir = Path(tmp, "in")
            out_dir = Path(tmp, "out")
            in_dir.mkdir()
            out_dir.mkdir()
            for i, w in enumerate(waves):
                save_wav(in_dir / f"{i}.wav", w)
            cmd = self.command + ["--in-dir", str(in_dir), "--out-dir", str(out_dir)]
            if self.layer is not None:
                cmd += ["--layer", str(self.layer)]
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise BackendError(f"extractor exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
            outs = []
            for i in range(len(waves)):
                path = out_dir / f"{i}.npy"
                if not path.exists():
                    raise BackendError(f"extractor produced no output for item {i}")
                arr = np.load(path).astype(np.float32)
                if arr.ndim != 2:
                    raise BackendError(f"extractor output {i} has shape {arr.shape}, expected 2-D")
                outs.append(arr)
            return outs

    def extract_batch(self, waves: list[Waveform]) -> list[np.ndarray]:
        errors = []
        for attempt in range(self.retries + 1):
            try:
                return self._run_once(waves)
            except (BackendError, OSError, subprocess.TimeoutExpired) as exc:
                errors.append(f"attempt {attempt + 1}: {exc}")
                time.sleep(min(0.1 * 2 ** attempt, 2.0))
        raise BackendError("external extractor failed; " + "; ".join(errors))


def make_extractor(cfg) -> StubExtractor | ExternalExtractor:
    if cfg.backend == "stub":
        return StubExtractor(cfg.feature_dim, cfg.seed)
    if cfg.backend == "external":
        return ExternalExtractor(cfg.command or [], cfg.layer, cfg.timeout, cfg.retries)
    raise BackendError(f"unknown content backend {cfg.backend!r}")


def extract(w: Waveform, backend) -> ContentFeatures:
    if w.sample_rate != 16000:
        raise ValidationError(f"content features expect 16 kHz audio, got {w.sample_rate}")
    values = backend.extract_batch([w])[0]
    n_frames = len(w) // backend.hop
    return ContentFeatures(align_frames(values, n_frames), backend.hop, backend.source)


def stub_extract(w: Waveform, seed: int = 1234, feature_dim: int = 64) -> ContentFeatures:
    return extract(w, StubExtractor(feature_dim, seed))


def write_feature_cache(path, records: dict[str, np.ndarray]):
    """Write ``{utt_id: [frames, dim] array}`` as length-prefixed float32 records."""
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + struct.pack("<II", _CACHE_VERSION, len(records)))
        for utt_id, values in records.items():
            values = np.ascontiguousarray(values, dtype="<f4")
            key = utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<II", *values.shape))
            fh.write(values.tobytes())


def read_feature_cache(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    head = len(_CACHE_MAGIC)
    if data[:head] != _CACHE_MAGIC:
        raise ValidationError(f"{path} is not a feature cache")
    try:
        version, count = struct.unpack_from("<II", data, head)
        if version != _CACHE_VERSION:
            raise ValidationError(f"feature cache version {version}, expected {_CACHE_VERSION}")
        pos = head + 8
        out = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            key = data[pos:pos + klen].decode("utf-8")
            pos += klen
            frames, dim = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = frames * dim * 4
            if pos + nbytes > len(data):
                raise ValidationError(f"feature cache {path} is truncated")
            out[key] = np.frombuffer(data, "<f4", frames * dim, pos).reshape(frames, dim).copy()
            pos += nbytes
    except struct.error as exc:
        raise ValidationError(f"feature cache {path} is truncated") from exc
    return out
