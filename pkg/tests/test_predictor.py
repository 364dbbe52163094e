import numpy as np
import pytest
import torch

from stormse.oracles import gradient_check
from stormse.predictor import (IdentityPredictor, OraclePredictor, PredictorError, SpectralGatePredictor,
                               ToyPredictorNet, predict, supervised_loss)
from stormse.spectral import Waveform, normalize, to_warped_spectrogram


def test_toy_predictor_has_no_noise_pathway():
    net = ToyPredictorNet()
    assert net.net.emb is None
    assert all(block.film is None for block in list(net.net.enc) + list(net.net.dec))
    y = torch.randn(2, 256, 12, dtype=torch.complex64)
    assert torch.equal(net(y), y)  # zero-initialized head: starts as identity
    assert net(y[0]).shape == y[0].shape


def test_supervised_loss_examples(gen):
    x0 = torch.randn(3, 8, 5, dtype=torch.complex128, generator=gen)
    assert supervised_loss(IdentityPredictor(), x0, x0).item() == 0.0
    zero = lambda y: torch.zeros_like(y)  # noqa: E731
    d = x0[0].numel()
    expected = (x0.abs() ** 2).sum(dim=(1, 2)).mean().item() / d
    assert supervised_loss(zero, x0, x0).item() == pytest.approx(expected)
    with pytest.raises(ValueError):
        supervised_loss(zero, x0, x0[:, :4])


def test_supervised_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = ToyPredictorNet((4, 8)).double()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.1 * torch.randn_like(p))
    gen = torch.Generator().manual_seed(2)
    x0 = torch.randn(2, 16, 8, dtype=torch.complex128, generator=gen)
    y = torch.randn(2, 16, 8, dtype=torch.complex128, generator=gen)
    rel, _, _ = gradient_check(list(net.parameters()), lambda: supervised_loss(net, x0, y), 100)
    assert rel.max() <= 1e-4


def _warped(x):
    _, n, f = normalize(Waveform(x), Waveform(x))
    return to_warped_spectrogram(n, f, dtype=torch.complex128).bins


def test_spectral_gate_on_clean_and_noise(rng):
    t = np.arange(32000) / 16000
    env = (np.sin(2 * np.pi * 2 * t) > 0).astype(float)  # on/off speech-like envelope with silent frames
    clean = env * sum(np.sin(2 * np.pi * k * 150 * t) / k for k in range(1, 6))
    gate = SpectralGatePredictor()
    y = _warped(clean)
    out = gate.predict(y)
    e_in = (y.abs() ** 4).sum().item()
    e_out = (out.abs() ** 4).sum().item()
    assert abs(10 * np.log10(e_out / e_in)) <= 1.0
    noise = _warped(rng.standard_normal(32000))
    e_noise_in = (noise.abs() ** 4).sum().item()
    e_noise_out = (gate.predict(noise).abs() ** 4).sum().item()
    assert 10 * np.log10(e_noise_in / e_noise_out) >= 6.0


def test_spectral_gate_invariants(gen):
    y = torch.randn(256, 30, dtype=torch.complex128, generator=gen)
    gate = SpectralGatePredictor(floor=0.2)
    g = gate.gain(y)
    assert g.min() >= 0.2 and g.max() <= 1.0
    out = gate.predict(y)
    assert torch.allclose(torch.angle(out), torch.angle(y))
    assert torch.equal(out, gate.predict(y))
    with pytest.raises(ValueError):
        SpectralGatePredictor(floor=0)


def test_predict_checks():
    y = torch.ones(4, 3, dtype=torch.complex64)
    assert torch.equal(predict(OraclePredictor(y * 2), y), y * 2)
    with pytest.raises(PredictorError, match="shape"):
        predict(OraclePredictor(y[:2]), y)
    bad = y.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(PredictorError, match="non-finite"):
        predict(OraclePredictor(bad), y)
