import math

import numpy as np
import pytest
import torch

from hiervst.config import AudioConfig, ModelConfig
from hiervst.errors import ConfigError, ValidationError
from hiervst.hag import HAG, UncondConfig, generate, pitch_loss, stft_recon_loss

from conftest import finite_difference_check, tiny_config
from test_audio import slaney_mel_oracle, stft_oracle

D64 = torch.float64


def tiny_hag(seed=0, dtype=D64):
    torch.manual_seed(seed)
    cfg = tiny_config().model
    return HAG(cfg, AudioConfig(), cfg.style_dim).to(dtype), cfg


@pytest.mark.parametrize("frames", [192, 30])
def test_output_lengths(frames):
    hag, cfg = tiny_hag()
    z = torch.randn(2, cfg.latent_dim, frames, dtype=D64)
    s = torch.randn(2, cfg.style_dim, dtype=D64)
    out = hag(z, s, torch.zeros(cfg.style_dim, dtype=D64))
    assert out.pitch.p_h.shape[-1] == frames * 4
    assert out.pitch.f0_pred.shape == (2, frames * 4)
    assert out.waveform.shape == (2, frames * 320)
    assert out.waveform.abs().max() < 1.0


def test_full_scale_lengths():
    cfg = ModelConfig()
    hag = HAG(cfg, AudioConfig(), cfg.style_dim).eval()
    with torch.no_grad():
        out = hag(torch.randn(1, 192, 192), torch.randn(1, 256), torch.zeros(256))
    assert out.pitch.p_h.shape[-1] == 768 and out.waveform.shape == (1, 61_440)


def test_style_changes_pitch_and_waveform():
    hag, cfg = tiny_hag()
    z = torch.randn(1, cfg.latent_dim, 20, dtype=D64)
    null = torch.zeros(cfg.style_dim, dtype=D64)
    a = hag(z, torch.randn(1, cfg.style_dim, dtype=D64), null)
    b = hag(z, torch.randn(1, cfg.style_dim, dtype=D64), null)
    assert not torch.allclose(a.waveform, b.waveform)
    assert not torch.allclose(a.pitch.f0_pred, b.pitch.f0_pred)


def test_deterministic_in_eval():
    hag, cfg = tiny_hag()
    hag.eval()
    z = torch.randn(1, cfg.latent_dim, 10, dtype=D64)
    s = torch.randn(1, cfg.style_dim, dtype=D64)
    null = torch.zeros(cfg.style_dim, dtype=D64)
    torch.testing.assert_close(hag(z, s, null).waveform, hag(z, s, null).waveform, rtol=0, atol=0)


# ---------------------------------------------------------------- unconditional training

def _null_rate(hag, p, n=10_000, seed=0):
    s = torch.ones(n, 3)
    null = torch.zeros(3)
    out, used = hag.substitute_style(s, null, p, torch.Generator().manual_seed(seed))
    assert torch.equal(out[used], torch.zeros(int(used.sum()), 3))
    assert torch.equal(out[~used], s[~used])
    return used.double().mean().item()


def test_null_substitution_rates():
    hag, _ = tiny_hag()
    hag.train()
    assert _null_rate(hag, 0.0) == 0.0
    assert _null_rate(hag, 1.0) == 1.0
    assert 0.085 <= _null_rate(hag, 0.1) <= 0.115


def test_never_substituted_at_inference():
    hag, _ = tiny_hag()
    hag.eval()
    assert _null_rate(hag, 1.0) == 0.0


def test_generate_reports_substitution():
    hag, cfg = tiny_hag()
    hag.train()
    z = torch.randn(4, cfg.latent_dim, 5, dtype=D64)
    s = torch.randn(4, cfg.style_dim, dtype=D64)
    out = generate(hag, z, s, torch.zeros(cfg.style_dim, dtype=D64), UncondConfig(1.0))
    assert out.used_null_style.all()
    with pytest.raises(ValidationError):
        UncondConfig(1.5)


# ---------------------------------------------------------------- losses

def numpy_log_mel(x):
    fb = slaney_mel_oracle(16000, 1280, 80, 0.0, 8000.0)
    return np.log(np.maximum(fb @ stft_oracle(x), 1e-5))


def test_stft_loss_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(6400) * 0.3
    y = rng.standard_normal(6400) * 0.3
    expected = np.mean(np.abs(numpy_log_mel(x) - numpy_log_mel(y)))
    got = stft_recon_loss(torch.tensor(x)[None], torch.tensor(y)[None]).item()
    assert got == pytest.approx(expected, rel=1e-6)


def test_stft_loss_of_half_amplitude_is_log2():
    x = torch.randn(1, 6400, dtype=D64)
    assert stft_recon_loss(x, 0.5 * x).item() == pytest.approx(math.log(2.0), rel=1e-6)


def test_stft_loss_zero_and_symmetric():
    x, y = torch.randn(2, 6400, dtype=D64), torch.randn(2, 6400, dtype=D64)
    assert stft_recon_loss(x, x).item() == 0.0
    assert stft_recon_loss(x, y).item() == pytest.approx(stft_recon_loss(y, x).item(), rel=1e-12)
    with pytest.raises(ValidationError):
        stft_recon_loss(x, y[..., :-1])


def test_pitch_loss_arithmetic():
    target = torch.tensor([[5.0, 0.0, 4.5, 0.0]])
    assert pitch_loss(target.clone(), target).item() == 0.0
    # unvoiced (zero) targets count like any other frame
    assert pitch_loss(target + 0.5, target).item() == pytest.approx(0.5)
    assert pitch_loss(torch.zeros_like(target), target).item() == pytest.approx(9.5 / 4)
    with pytest.raises(ValidationError):
        pitch_loss(target[:, :3], target)


def test_gradient_check_stft_and_pitch():
    hag, cfg = tiny_hag()
    g = torch.Generator().manual_seed(0)
    z = torch.randn(1, cfg.latent_dim, 6, generator=g, dtype=D64)
    s = torch.randn(1, cfg.style_dim, generator=g, dtype=D64)
    null = torch.zeros(cfg.style_dim, dtype=D64)
    ref = torch.randn(1, 6 * 320, generator=g, dtype=D64) * 0.3
    log_f0 = torch.rand(1, 24, generator=g, dtype=D64) * 6

    def loss():
        out = hag(z, s, null)
        return 45 * stft_recon_loss(ref, out.waveform) + 10 * pitch_loss(out.pitch.f0_pred, log_f0)

    worst, checked, entry = finite_difference_check(loss, list(hag.named_parameters()), 100)
    assert checked >= 100
    assert worst < 1e-3, entry


# ---------------------------------------------------------------- config coherence

@pytest.mark.parametrize("kw", [{"upsample_rates": (4, 5, 4, 2, 3)}, {"source_upsample_rates": (2, 3)},
                                {"upsample_rates": (5, 4, 4, 2, 2)}])
def test_rate_products_validated(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw).validate()


def test_hag_rejects_incoherent_rates():
    cfg = tiny_config().model
    cfg.upsample_rates = (4, 4, 4, 2, 2)
    with pytest.raises(ConfigError):
        HAG(cfg, AudioConfig(), cfg.style_dim)


def test_latent_channel_check():
    hag, cfg = tiny_hag()
    with pytest.raises(ValidationError):
        hag(torch.randn(1, cfg.latent_dim + 2, 5, dtype=D64), torch.randn(1, cfg.style_dim, dtype=D64),
            torch.zeros(cfg.style_dim, dtype=D64))
