import json
import math

import numpy as np
import pytest
import torch

from hiervst.discriminators import feature_matching_loss, gen_adv_loss
from hiervst.errors import CheckpointError
from hiervst.trainer import (CHECKPOINT_VERSION, Trainer, fine_tune_one_shot, load_checkpoint, loss_fields,
                             save_checkpoint, weighted_total)

from conftest import finite_difference_check, tiny_config, toy_batch, toy_data, tone

D64 = torch.float64


def tiny_trainer(dtype=torch.float32, **train_kw):
    cfg = tiny_config()
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return Trainer(cfg, dtype=dtype), cfg


def flat(module):
    return torch.cat([p.detach().reshape(-1).clone() for p in module.parameters()])


def totals(history):
    return [(h.total_gen, h.total_disc) for h in history]


# ---------------------------------------------------------------- determinism and checkpoints

def test_same_seed_same_loss_sequence():
    a, cfg = tiny_trainer()
    b, _ = tiny_trainer()
    data = toy_data(cfg)
    assert totals(a.fit(data, 4)) == totals(b.fit(data, 4))


def test_resume_continues_identical_sequence(tmp_path):
    straight, cfg = tiny_trainer()
    data = toy_data(cfg)
    reference = totals(straight.fit(data, 20))

    first, _ = tiny_trainer()
    head = totals(first.fit(data, 10))
    save_checkpoint(first, tmp_path / "mid.pt")
    resumed = load_checkpoint(tmp_path / "mid.pt")
    assert resumed.step == 10
    tail = totals(resumed.fit(data, 10))
    assert head + tail == reference


def test_save_load_save_is_byte_identical(tmp_path):
    tr, cfg = tiny_trainer()
    tr.fit(toy_data(cfg), 2)
    # the zip archive records the file name, so both copies use the same one
    first, second = tmp_path / "a" / "ckpt.pt", tmp_path / "b" / "ckpt.pt"
    save_checkpoint(tr, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert not (tmp_path / "a" / "ckpt.pt.tmp").exists()


def test_checkpoint_errors(tmp_path):
    tr, _ = tiny_trainer()
    path = tmp_path / "c.pt"
    save_checkpoint(tr, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.pt")
    state = tr.state_dict()
    state["format_version"] = CHECKPOINT_VERSION + 1
    torch.save(state, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pt")
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_periodic_checkpoints_and_metrics_log(tmp_path):
    tr, cfg = tiny_trainer()
    tr.fit(toy_data(cfg), 5, out_dir=tmp_path, log_path=tmp_path / "metrics.jsonl")
    assert (tmp_path / "ckpt_0000005.pt").exists() and (tmp_path / "latest.pt").exists()
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [1, 2, 3, 4, 5]
    assert set(lines[0]["losses"]) == set(loss_fields())
    assert all(math.isfinite(v) for x in lines for v in x["losses"].values())


# ---------------------------------------------------------------- step mechanics

def test_total_is_weighted_sum_of_components():
    tr, cfg = tiny_trainer()
    out = tr.train_step(toy_batch(cfg))
    w = cfg.train.loss_weights
    expected = (w.stft * out.stft + w.pitch * out.pitch + w.kl_linguistic * out.kl_linguistic
                + w.kl_acoustic * out.kl_acoustic + w.prosody * out.prosody + w.adv * out.adv_gen
                + w.feat_match * out.feat_match)
    assert out.total_gen == pytest.approx(expected, rel=1e-5)
    assert out.total_disc == out.adv_disc
    assert (w.stft, w.pitch, w.feat_match, w.adv, w.kl_linguistic, w.kl_acoustic, w.prosody) == (
        45.0, 10.0, 2.0, 1.0, 1.0, 1.0, 1.0)


def test_optimizers_hold_disjoint_parameter_sets():
    tr, _ = tiny_trainer()
    g = {id(p) for grp in tr.opt_g.param_groups for p in grp["params"]}
    d = {id(p) for grp in tr.opt_d.param_groups for p in grp["params"]}
    assert not g & d
    assert g == {id(p) for p in tr.model.parameters()}
    assert d == {id(p) for p in tr.disc.parameters()}
    for opt in (tr.opt_g, tr.opt_d):
        grp = opt.param_groups[0]
        assert grp["betas"] == (0.8, 0.99) and grp["weight_decay"] == 0.01 and grp["lr"] == 2e-4


def test_discriminator_update_leaves_generator_alone():
    """Zero one optimizer's learning rate and check only the other side moves."""
    tr, cfg = tiny_trainer()
    batch = toy_batch(cfg)
    g0, d0 = flat(tr.model), flat(tr.disc)
    tr.opt_g.param_groups[0]["lr"] = 0.0
    tr.train_step(batch)
    assert torch.equal(flat(tr.model), g0)
    assert not torch.equal(flat(tr.disc), d0)

    tr2, _ = tiny_trainer()
    g0, d0 = flat(tr2.model), flat(tr2.disc)
    tr2.opt_d.param_groups[0]["lr"] = 0.0
    tr2.train_step(batch)
    assert torch.equal(flat(tr2.disc), d0)
    assert not torch.equal(flat(tr2.model), g0)


@pytest.mark.filterwarnings("ignore:Seems like `optimizer.step\\(\\)` has been overridden")
def test_generator_backward_does_not_touch_discriminator_grads():
    tr, cfg = tiny_trainer()
    seen = []
    original = tr.opt_g.step

    def spy(*a, **k):
        seen.append([None if p.grad is None else p.grad.clone() for p in tr.disc.parameters()])
        return original(*a, **k)

    disc_grads = []
    original_d = tr.opt_d.step

    def spy_d(*a, **k):
        disc_grads.append([p.grad.clone() for p in tr.disc.parameters()])
        return original_d(*a, **k)

    tr.opt_g.step, tr.opt_d.step = spy, spy_d
    tr.train_step(toy_batch(cfg))
    # at the generator update the discriminator grads are still exactly those of its own loss
    assert all(torch.equal(a, b) for a, b in zip(seen[0], disc_grads[0]))
    assert all(p.requires_grad for p in tr.disc.parameters())


def test_lr_decays_per_epoch_and_is_monotone():
    tr, cfg = tiny_trainer()
    data = toy_data(cfg)
    lrs = []
    tr.fit(data, 6, callback=lambda t, _: lrs.append(t.lr))
    # two utterances, batch 2: one epoch per step
    assert tr.steps_per_epoch == 1
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(2e-4 * 0.999 ** 6, rel=1e-9)


def test_window_alignment():
    tr, cfg = tiny_trainer()
    batch = toy_batch(cfg)
    starts = tr.sample_window_starts(batch.lengths)
    assert torch.all(starts >= 0) and torch.all(starts + tr.window_frames <= batch.lengths)
    step = tr.model.generator_forward(batch.to(tr.dtype), starts, tr.window_frames)
    hop = cfg.audio.hop_length
    for b in range(batch.wav.size(0)):
        s = int(starts[b])
        torch.testing.assert_close(step.wav_slice[b], batch.wav[b, s * hop:(s + tr.window_frames) * hop])
    assert step.output.waveform.shape == step.wav_slice.shape


def test_stub_extractor_is_not_trained():
    tr, cfg = tiny_trainer()
    data = toy_data(cfg)
    before = [w.clone() for w in data.extractor._weights]
    tr.fit(data, 2)
    assert all(torch.equal(a, b) for a, b in zip(before, data.extractor._weights))
    assert not any(isinstance(w, torch.nn.Parameter) for w in data.extractor._weights)


def test_null_style_rate_tracked():
    tr, cfg = tiny_trainer(p_uncond=1.0)
    out = tr.train_step(toy_batch(cfg))
    assert out.null_style == 1.0 and tr.null_hits == tr.null_draws == 2


# ---------------------------------------------------------------- one-shot fine-tuning

def test_fine_tune_zero_steps_is_bit_exact_copy():
    tr, cfg = tiny_trainer()
    tuned = fine_tune_one_shot(tr, tone(200, 0.5), toy_data(cfg).extractor, steps=0)
    assert tuned is not tr
    for a, b in zip(tr.model.state_dict().values(), tuned.model.state_dict().values()):
        assert torch.equal(a, b)


def test_fine_tune_updates_copy_without_null_style():
    tr, cfg = tiny_trainer()
    before = flat(tr.model)
    tuned = fine_tune_one_shot(tr, tone(200, 0.5), toy_data(cfg).extractor, steps=2, lr=1e-4)
    assert torch.equal(flat(tr.model), before)
    assert not torch.equal(flat(tuned.model), before)
    assert tuned.p_uncond == 0.0 and tuned.null_hits == 0
    assert tuned.opt_g.param_groups[0]["lr"] == 1e-4


# ---------------------------------------------------------------- gradients of the full objective

def test_full_generator_objective_gradient_check():
    tr, cfg = tiny_trainer(dtype=D64)
    batch = toy_batch(cfg, dtype=D64)
    starts = torch.tensor([1, 3])
    tr.disc.requires_grad_(False)

    def loss():
        gen = tr.model.generator_forward(batch, starts, tr.window_frames, 0.0, torch.Generator().manual_seed(0))
        losses = dict(gen.losses)
        fake = tr.disc(gen.output.waveform)
        real = tr.disc(gen.wav_slice)
        losses["adv"] = gen_adv_loss(fake)
        losses["feat_match"] = feature_matching_loss(real, fake)
        losses["adv_gen"] = losses["adv"]
        return weighted_total(losses, cfg.train.loss_weights)

    named = [(n, p) for n, p in tr.model.named_parameters() if n != "style_encoder.null"]
    worst, checked, entry = finite_difference_check(loss, named, 120)
    assert checked >= 100
    assert worst < 1e-3, entry
