"""Adversarial training loop, checkpoints and one-shot fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform
from .config import HierVSTConfig
from .data import TrainingData, collate
from .discriminators import Discriminator, disc_loss, feature_matching_loss, gen_adv_loss
from .errors import CheckpointError, NumericalError
from .model import Batch, HierVST

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class LossBreakdown:
    stft: float
    pitch: float
    kl_linguistic: float
    kl_acoustic: float
    prosody: float
    adv_gen: float
    adv_disc: float
    feat_match: float
    total_gen: float
    total_disc: float
    null_style: float = 0.0

    def as_dict(self):
        return asdict(self)


GEN_COMPONENTS = {
    "stft": "stft", "pitch": "pitch", "kl_linguistic": "kl_linguistic",
    "kl_acoustic": "kl_acoustic", "prosody": "prosody", "adv_gen": "adv", "feat_match": "feat_match",
}


def weighted_total(losses: dict, weights) -> torch.Tensor:
    return sum(getattr(weights, w) * losses[name] for name, w in GEN_COMPONENTS.items())


class Trainer:
    """Owns every mutable piece of training state.

    Generator-side parameters (style encoder, HVAE, HAG) and discriminator
    parameters live in disjoint optimizers.
    """

    def __init__(self, cfg: HierVSTConfig, dtype=torch.float32, steps_per_epoch: int = 1):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        tc = cfg.train
        torch.manual_seed(tc.seed)
        self.model = HierVST(cfg).to(dtype)
        self.disc = Discriminator(cfg.model).to(dtype)
        self.p_uncond = tc.p_uncond
        self.opt_g = self._optimizer(self.model.parameters(), tc.learning_rate)
        self.opt_d = self._optimizer(self.disc.parameters(), tc.learning_rate)
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(self.opt_g, tc.lr_decay)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(self.opt_d, tc.lr_decay)
        self.step = 0
        self.epoch = 0
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.torch_rng = torch.Generator().manual_seed(tc.seed)
        self.data_rng = np.random.default_rng(tc.seed)
        self.null_draws = 0
        self.null_hits = 0

    def _optimizer(self, params, lr):
        tc = self.cfg.train
        return torch.optim.AdamW(params, lr=lr, betas=tuple(tc.betas), weight_decay=tc.weight_decay,
                                 foreach=True)

    @property
    def lr(self) -> float:
        return self.opt_g.param_groups[0]["lr"]

    @property
    def window_frames(self) -> int:
        return self.cfg.train.window_samples // self.cfg.audio.hop_length

    def sample_window_starts(self, lengths: torch.Tensor) -> torch.Tensor:
        wf = self.window_frames
        span = (lengths - wf + 1).clamp(min=1).to(torch.float64)
        u = torch.rand(lengths.size(0), generator=self.torch_rng, dtype=torch.float64)
        return torch.floor(u * span).long()

    def _check_finite(self, losses: dict, stage: str):
        bad = [k for k, v in losses.items() if not torch.isfinite(v)]
        if bad:
            raise NumericalError(f"non-finite {stage} losses {bad} at step {self.step}",
                                 {k: float(v) for k, v in losses.items()})

    def train_step(self, batch: Batch) -> LossBreakdown:
        batch = batch.to(self.dtype)
        weights = self.cfg.train.loss_weights
        self.model.train()
        self.disc.train()
        starts = self.sample_window_starts(batch.lengths)
        gen = self.model.generator_forward(batch, starts, self.window_frames, self.p_uncond, self.torch_rng)
        self._check_finite(gen.losses, "generator")
        wav_hat = gen.output.waveform

        self.disc.requires_grad_(True)
        real = self.disc(gen.wav_slice)
        fake = self.disc(wav_hat.detach())
        loss_d = disc_loss(real, fake)
        self._check_finite({"adv_disc": loss_d}, "discriminator")
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        if self.cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.disc.parameters(), self.cfg.train.grad_clip)
        self.opt_d.step()

        self.disc.requires_grad_(False)
        fake = self.disc(wav_hat)
        with torch.no_grad():
            real = self.disc(gen.wav_slice)
        losses = dict(gen.losses)
        losses["adv"] = gen_adv_loss(fake)
        losses["feat_match"] = feature_matching_loss(real, fake)
        losses["adv_gen"] = losses["adv"]
        total = weighted_total(losses, weights)
        self._check_finite({"total_gen": total, "adv": losses["adv"], "feat_match": losses["feat_match"]},
                           "generator")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.opt_g.step()
        self.disc.requires_grad_(True)

        used = gen.output.used_null_style
        self.null_draws += used.numel()
        self.null_hits += int(used.sum())
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.epoch += 1
            self.sched_g.step()
            self.sched_d.step()
        losses = {k: v.detach() for k, v in losses.items()}
        return LossBreakdown(
            stft=float(losses["stft"]), pitch=float(losses["pitch"]),
            kl_linguistic=float(losses["kl_linguistic"]), kl_acoustic=float(losses["kl_acoustic"]),
            prosody=float(losses["prosody"]), adv_gen=float(losses["adv"]), adv_disc=float(loss_d.detach()),
            feat_match=float(losses["feat_match"]), total_gen=float(total.detach()),
            total_disc=float(loss_d.detach()),
            null_style=float(used.to(torch.float64).mean()),
        )

    def fit(self, data: TrainingData, steps: int, out_dir=None, log_path=None, callback=None):
        """Run ``steps`` optimizer steps; returns the list of LossBreakdowns."""
        tc = self.cfg.train
        self.steps_per_epoch = max(1, math.ceil(len(data) / tc.batch_size))
        history = []
        out_dir = Path(out_dir) if out_dir else None
        log_fh = open(log_path, "a") if log_path else None
        t0 = time.time()
        try:
            for _ in range(steps):
                batch = collate(data.sample(self.data_rng, tc.batch_size))
                losses = self.train_step(batch)
                history.append(losses)
                if log_fh:
                    log_fh.write(json.dumps({"step": self.step, "losses": losses.as_dict(), "lr": self.lr,
                                             "wall_time": time.time() - t0}) + "\n")
                    log_fh.flush()
                if self.step % tc.log_interval == 0:
                    log.info("step %d gen %.3f disc %.3f stft %.3f pitch %.3f", self.step, losses.total_gen,
                             losses.total_disc, losses.stft, losses.pitch)
                if out_dir and self.step % tc.checkpoint_interval == 0:
                    save_checkpoint(self, out_dir / f"ckpt_{self.step:07d}.pt")
                    save_checkpoint(self, out_dir / "latest.pt")
                if callback:
                    callback(self, losses)
        finally:
            if log_fh:
                log_fh.close()
        return history

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "dtype": str(self.dtype).replace("torch.", ""),
            "model": self.model.state_dict(),
            "disc": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "sched_g": self.sched_g.state_dict(),
            "sched_d": self.sched_d.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "steps_per_epoch": self.steps_per_epoch,
            "p_uncond": self.p_uncond,
            "null_counts": [self.null_draws, self.null_hits],
            "torch_rng": self.torch_rng.get_state(),
            "data_rng": self.data_rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.disc.load_state_dict(state["disc"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.sched_g.load_state_dict(state["sched_g"])
        self.sched_d.load_state_dict(state["sched_d"])
        self.step = state["step"]
        self.epoch = state["epoch"]
        self.steps_per_epoch = state["steps_per_epoch"]
        self.p_uncond = state["p_uncond"]
        self.null_draws, self.null_hits = state["null_counts"]
        self.torch_rng.set_state(state["torch_rng"])
        self.data_rng.bit_generator.state = state["data_rng"]


def train_step(state: Trainer, batch: Batch):
    return state, state.train_step(batch)


def _canonical(obj):
    """Rebuild containers and intern strings.

    Pickle memoizes by object identity, so two equal states can serialize
    differently depending on which strings happen to be shared. Interning
    makes the byte stream a function of the values alone.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def save_checkpoint(state: Trainer, path):
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(_canonical(state.state_dict()), tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> Trainer:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or "format_version" not in state:
        raise CheckpointError(f"{path} is not a checkpoint")
    if state["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {state['format_version']} does not match supported version {CHECKPOINT_VERSION}")
    cfg = HierVSTConfig.from_dict(state["config"], HierVSTConfig())
    dtype = getattr(torch, state.get("dtype", "float32"))
    trainer = Trainer(cfg, dtype=dtype)
    try:
        trainer.load_state_dict(state)
    except (KeyError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is incompatible: {exc}") from exc
    return trainer


def fine_tune_one_shot(state: Trainer, target: Waveform, extractor, steps: int | None = None,
                       lr: float | None = None, batch_size: int | None = None) -> Trainer:
    """Adapt a copy of ``state`` to one utterance, conditional generation only.

    Optimizers are re-created with the same settings at the lower learning
    rate; the input trainer is left untouched.
    """
    tc = state.cfg.train
    steps = tc.finetune_steps if steps is None else steps
    lr = tc.finetune_lr if lr is None else lr
    tuned = copy.deepcopy(state)
    if steps <= 0:
        return tuned
    tuned.p_uncond = 0.0
    tuned.opt_g = tuned._optimizer(tuned.model.parameters(), lr)
    tuned.opt_d = tuned._optimizer(tuned.disc.parameters(), lr)
    tuned.sched_g = torch.optim.lr_scheduler.ExponentialLR(tuned.opt_g, 1.0)
    tuned.sched_d = torch.optim.lr_scheduler.ExponentialLR(tuned.opt_d, 1.0)
    data = TrainingData([target], tuned.cfg, extractor)
    batch_size = batch_size or tc.batch_size
    for _ in range(steps):
        tuned.train_step(collate(data.sample(tuned.data_rng, batch_size)))
    return tuned


def loss_fields():
    return [f.name for f in fields(LossBreakdown)]
