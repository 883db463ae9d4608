import math

import numpy as np
import pytest
import torch

from unitadapt import nets
from unitadapt.exceptions import ContractViolation, ModelHealthError
from unitadapt.nets import AdaptiveTTS, ScoreDecoder, SequenceEncoder


@pytest.fixture
def model():
    torch.manual_seed(0)
    return AdaptiveTTS(n_symbols=20, n_units=12, n_speakers=3, n_mels=8, hidden=32, dec_channels=16)


def test_param_groups_present(model):
    assert nets.PARAM_GROUPS == ("text_encoder", "unit_encoder", "duration_predictor", "decoder",
                                 "speaker_table")
    for name in nets.PARAM_GROUPS:
        assert sum(p.numel() for p in model.group(name).parameters()) > 0
    with pytest.raises(ContractViolation):
        model.group("vocoder")


def test_encoders_share_architecture(model):
    shapes = lambda enc: [(n, tuple(p.shape)) for n, p in enc.named_parameters() if not n.startswith("embed")]
    assert shapes(model.text_encoder) == shapes(model.unit_encoder)


@pytest.mark.parametrize("which", ["text", "units"])
def test_encoder_contracts(model, which):
    encode = nets.encode_text if which == "text" else nets.encode_units
    ids = [1, 4, 2, 7, 3]
    with torch.no_grad():
        a, b = encode(model, ids), encode(model, ids)
        assert torch.equal(a, b)
        assert a.shape == (5, 8)
        assert encode(model, [3]).shape == (1, 8)
        swapped = encode(model, [1, 2, 4, 7, 3])
    # swapping tokens 1 and 2 changes exactly those rows
    assert not torch.allclose(a[1], swapped[1]) and not torch.allclose(a[2], swapped[2])


def test_encoder_rejects_out_of_vocabulary(model):
    with pytest.raises(ContractViolation):
        nets.encode_units(model, [0, 12])
    with pytest.raises(ContractViolation):
        nets.encode_text(model, [-1])


def test_encoder_padding_does_not_leak():
    torch.manual_seed(0)
    enc = SequenceEncoder(10, 4, hidden=16).eval()
    with torch.no_grad():
        alone, _ = enc(torch.tensor([[1, 2, 3]]))
        padded, _ = enc(torch.tensor([[1, 2, 3, 9, 9]]), torch.tensor([[True] * 3 + [False] * 2]))
    torch.testing.assert_close(alone[0], padded[0, :3], atol=1e-5, rtol=1e-5)
    assert torch.all(padded[0, 3:] == 0)


def test_duration_conversion():
    out = nets.durations_from_log(torch.tensor([0.0, math.log(3.0), -10.0, 1.2]))
    assert out.tolist() == [1, 3, 1, 3]
    np.testing.assert_array_equal(nets.durations_from_log(np.array([0.0, -5.0])), [1, 1])


def test_predict_durations_shape(model):
    _, hidden = model.text_encoder(torch.tensor([1, 2, 3]))
    assert nets.predict_durations(model, hidden[0]).shape == (3,)


def test_speaker_table_unit_norm(model):
    assert torch.allclose(model.speaker_table.weight.norm(dim=-1), torch.ones(3))
    with torch.no_grad():
        model.speaker_table.weight[1] *= 3
    before = model.speaker_table.weight[0].clone()
    model.speaker_table.renormalize()
    assert torch.allclose(model.speaker_table.weight.norm(dim=-1), torch.ones(3))
    assert torch.equal(model.speaker_table.weight[0], before)


@pytest.mark.parametrize("T", [1, 4, 7, 16])
def test_score_shape(model, T):
    x = torch.randn(T, 8)
    with torch.no_grad():
        s = nets.score(model, x, 0.5, torch.randn(T, 8), model.speaker_table(0))
    assert s.shape == (T, 8)
    assert torch.isfinite(s).all()


def test_score_depends_on_speaker(model):
    x, c = torch.randn(6, 8), torch.randn(6, 8)
    with torch.no_grad():
        a = nets.score(model, x, 0.3, c, model.speaker_table(0))
        b = nets.score(model, x, 0.3, c, model.speaker_table(1))
    assert not torch.allclose(a, b)


def test_score_batch_matches_single(model):
    x, c = torch.randn(2, 6, 8), torch.randn(2, 6, 8)
    e = model.speaker_table([0, 2])
    with torch.no_grad():
        batched = model.decoder(x, torch.tensor([0.2, 0.7]), c, e)
        first = nets.score(model, x[0], 0.2, c[0], e[0])
    torch.testing.assert_close(batched[0], first, atol=1e-5, rtol=1e-5)


def test_score_finite_difference_gradient():
    torch.manual_seed(0)
    dec = ScoreDecoder(4, 3, channels=8, time_dim=16).double()
    x = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
    c = torch.randn(1, 4, 4, dtype=torch.float64)
    e = torch.nn.functional.normalize(torch.randn(1, 3, dtype=torch.float64), dim=-1)
    t = torch.tensor([0.4], dtype=torch.float64)
    f = lambda inp: dec(inp, t, c, e).mean()
    (grad,) = torch.autograd.grad(f(x), x)
    h = 1e-6
    fd = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            plus, minus = x.detach().clone(), x.detach().clone()
            plus[idx] += h
            minus[idx] -= h
            fd[idx] = (f(plus) - f(minus)) / (2 * h)
    rel = (grad - fd).norm() / fd.norm()
    assert rel < 1e-3


def test_score_health_check(model):
    x = torch.full((4, 8), float("nan"))
    with pytest.raises(ModelHealthError):
        with torch.no_grad():
            nets.score(model, x, 0.5, torch.zeros(4, 8), model.speaker_table(0))


def test_decoder_condition_shape_mismatch(model):
    with pytest.raises(ContractViolation):
        model.decoder(torch.zeros(1, 4, 8), torch.tensor([0.5]), torch.zeros(1, 5, 8), model.speaker_table([0]))


def test_freeze_groups(model):
    model.freeze("decoder", "speaker_table")
    assert not any(p.requires_grad for p in model.decoder.parameters())
    assert all(p.requires_grad for p in model.unit_encoder.parameters())
    model.unfreeze_all()
    assert all(p.requires_grad for p in model.parameters())


def test_sinusoidal_embedding_distinguishes_times():
    emb = nets.sinusoidal_embedding(torch.tensor([0.1, 0.1001, 0.9]), 32)
    assert emb.shape == (3, 32)
    assert not torch.allclose(emb[0], emb[1])
