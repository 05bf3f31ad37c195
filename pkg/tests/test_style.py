import numpy as np
import pytest
import torch

from hiervst.errors import ValidationError
from hiervst.style import MIN_FRAMES, StyleEncoder, encode_style, null_embedding

from conftest import finite_difference_check


def make(pooling="attentive", dtype=torch.float32, **kw):
    torch.manual_seed(0)
    return StyleEncoder(n_mels=80, conv_channels=4, hidden=16, style_dim=12, n_heads=2, pooling=pooling,
                        **kw).to(dtype)


def test_batch_shape_and_null_dimension():
    enc = make()
    mel = torch.randn(5, 80, 40)
    s = encode_style(enc, mel)
    assert s.values.shape == (5, 12) and s.origin == "encoded"
    n = null_embedding(enc)
    assert n.values.shape == (12,) and n.origin == "null"
    assert torch.all(n.values == 0)


@pytest.mark.parametrize("pooling", ["mean", "attentive"])
def test_frame_permutation_invariance(pooling):
    enc = make(pooling, torch.float64)
    mel = torch.randn(2, 80, 33, dtype=torch.float64)
    perm = torch.randperm(33)
    torch.testing.assert_close(enc(mel), enc(mel[..., perm]), rtol=1e-10, atol=1e-10)


def test_padding_frames_are_ignored():
    enc = make(dtype=torch.float64)
    mel = torch.randn(1, 80, 20, dtype=torch.float64)
    padded = torch.cat([mel, torch.randn(1, 80, 7, dtype=torch.float64) * 5], -1)
    mask = torch.zeros(1, 1, 27, dtype=torch.float64)
    mask[..., :20] = 1
    torch.testing.assert_close(enc(mel), enc(padded, mask), rtol=1e-10, atol=1e-10)


def test_too_few_frames():
    enc = make()
    enc(torch.randn(1, 80, MIN_FRAMES))
    with pytest.raises(ValidationError):
        enc(torch.randn(1, 80, MIN_FRAMES - 1))


def test_null_is_single_trainable_parameter():
    enc = make()
    a, b = null_embedding(enc).values, null_embedding(enc).values
    assert a is b
    opt = torch.optim.SGD([enc.null], lr=0.1)
    loss = (enc.null - 1).pow(2).sum()
    loss.backward()
    before = enc.null.detach().clone()
    opt.step()
    assert not torch.equal(before, enc.null.detach())


def test_gradient_matches_finite_differences():
    enc = make(dtype=torch.float64)
    mel = torch.randn(2, 80, 12, dtype=torch.float64)
    target = torch.randn(2, 12, dtype=torch.float64)

    def loss():
        return ((enc(mel) - target) ** 2).sum()

    named = [(n, p) for n, p in enc.named_parameters() if n != "null"]
    worst, checked, entry = finite_difference_check(loss, named, 60)
    assert checked >= 60
    assert worst < 1e-3, entry
