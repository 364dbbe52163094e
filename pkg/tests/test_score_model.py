import numpy as np
import pytest
import torch

from stormse.oracles import gradient_check
from stormse.score_model import (EMA, AnalyticGaussianScore, ConditioningMode, GaussianPrior, ToyScoreNet,
                                 analytic_score, dsm_loss, ema_update, perturb_batch, sample_tau)
from stormse.sde import SdeConfig, kernel_mean, kernel_var, mean_weight, standard_noise

CFG = SdeConfig()


class CheatingModel:
    """Handed z in advance: returns exactly -z / sigma."""

    def __init__(self, z):
        self.z = z

    def score(self, x_tau, conditioning, sigma, tau):
        return -self.z / sigma.view(-1, 1, 1)


class ZeroModel:
    def score(self, x_tau, conditioning, sigma, tau):
        return torch.zeros_like(x_tau)


def batch(gen, b=4, f=16, t=8):
    x0 = torch.randn(b, f, t, dtype=torch.complex128, generator=gen)
    y = torch.randn(b, f, t, dtype=torch.complex128, generator=gen)
    return x0, y


def test_conditioning_modes():
    y, d = torch.zeros(1), torch.ones(1)
    assert ConditioningMode.NOISY.stack(y, d) == [y]
    assert ConditioningMode.POST_DENOISER.stack(y, d) == [d]
    assert ConditioningMode.BOTH.stack(y, d) == [y, d]
    assert [m.n_inputs for m in ConditioningMode] == [1, 1, 2]


def test_toy_score_net_contract():
    net = ToyScoreNet()
    assert net.n_parameters <= 200_000
    x = torch.randn(2, 256, 20, dtype=torch.complex64)
    out = net(x, [x, x], torch.tensor([0.1, 0.3]))
    assert out.shape == x.shape and torch.isfinite(torch.view_as_real(out)).all()
    single = net(x[0], [x[0], x[0]], 0.1)
    assert single.shape == x[0].shape
    assert torch.equal(net(x, [x, x], 0.2), net(x, [x, x], 0.2))
    with pytest.raises(ValueError):
        net(x, [x], 0.1)
    assert ToyScoreNet(1).arch()["n_conditioning"] == 1


def test_prior_skip_matches_gaussian_oracle(gen):
    """With the zero-initialised head the net is exactly the Gaussian posterior score around the anchor."""
    net = ToyScoreNet(2, (4, 8), 8, prior_ref=1, prior_std=0.5).double()
    x_tau, y = batch(gen, 2)
    anchor = torch.full_like(y, 1.0)
    tau = torch.tensor([0.2, 0.9], dtype=torch.float64)
    sigma = torch.sqrt(kernel_var(tau, CFG))
    out = net.score(x_tau, [y, anchor], sigma, tau)
    for i in range(2):
        ref = analytic_score(x_tau[i], float(tau[i]), GaussianPrior(1.0, 0.5), 1.0, CFG)
        assert torch.allclose(out[i], ref, rtol=1e-10, atol=1e-10)
    with pytest.raises(ValueError):
        net(x_tau, [y, anchor], sigma)
    with pytest.raises(ValueError):
        ToyScoreNet(1, prior_ref=1)
    assert net.arch()["prior_ref"] == 1


def test_dsm_cheating_model_zero_loss(gen):
    x0, y = batch(gen)
    z = standard_noise(x0, gen)
    loss = dsm_loss(CheatingModel(z), x0, y, None, CFG, gen, z=z)
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_dsm_zero_model_expectation():
    gen = torch.Generator().manual_seed(0)
    x0 = torch.zeros(10_000, 1, 1, dtype=torch.complex128)
    tau = torch.full((10_000,), 0.5, dtype=torch.float64)
    loss = dsm_loss(ZeroModel(), x0, x0, None, CFG, gen, tau=tau).item()
    # mean over bins: E|z|^2 / sigma^2 = 1 / sigma^2 per bin, so d / sigma^2 per item
    assert loss == pytest.approx(1.0 / kernel_var(0.5, CFG), rel=0.03)


def test_dsm_shape_mismatch(gen):
    x0, y = batch(gen)
    with pytest.raises(ValueError):
        dsm_loss(ZeroModel(), x0, y[:, :8], None, CFG, gen)


def test_tau_sampling_range(gen):
    tau = sample_tau(10_000, CFG, gen, dtype=torch.float64)
    assert tau.min() >= CFG.t_eps and tau.max() <= CFG.t_max
    assert tau.mean().item() == pytest.approx((CFG.t_eps + CFG.t_max) / 2, abs=0.01)


def test_perturb_batch_uses_anchor(gen):
    x0, y = batch(gen, b=2)
    anchor = torch.zeros_like(y)
    tau = torch.tensor([0.2, 0.9], dtype=torch.float64)
    z = torch.zeros_like(x0)
    _, _, _, x_tau = perturb_batch(x0, anchor, CFG, gen, tau=tau, z=z)
    assert torch.allclose(x_tau[1], kernel_mean(x0[1], anchor[1], 0.9, CFG))


def test_dsm_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = ToyScoreNet(2, (4, 8), 8).double()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.1 * torch.randn_like(p))
    gen = torch.Generator().manual_seed(1)
    x0, y = batch(gen, 2, 16, 8)
    tau = torch.tensor([0.3, 0.7], dtype=torch.float64)
    z = standard_noise(x0, gen)
    rel, _, _ = gradient_check(list(net.parameters()), lambda: dsm_loss(net, x0, y, [y, y], CFG, tau=tau, z=z), 100)
    assert rel.max() <= 1e-4


def test_conditioning_changes_inputs_not_loss_formula(gen):
    x0, y = batch(gen, 2)
    z = standard_noise(x0, gen)
    tau = torch.tensor([0.4, 0.6], dtype=torch.float64)
    seen = []

    class Spy(ZeroModel):
        def score(self, x_tau, conditioning, sigma, tau):
            seen.append(len(conditioning))
            return super().score(x_tau, conditioning, sigma, tau)

    losses = [dsm_loss(Spy(), x0, y, m.stack(y, x0), CFG, tau=tau, z=z).item() for m in ConditioningMode]
    assert seen == [1, 1, 2]
    assert losses[0] == losses[1] == losses[2]


def test_ema_update_examples():
    s, p = torch.tensor([1.0, 2.0]), torch.tensor([3.0, -1.0])
    assert torch.equal(ema_update(s, p, 0.0), p)
    assert torch.equal(ema_update(s, p, 1.0), s)
    gap = (s - p).abs()
    for _ in range(5):
        s = ema_update(s, p, 0.9)
        new_gap = (s - p).abs()
        assert torch.allclose(new_gap, 0.9 * gap)
        gap = new_gap
    with pytest.raises(ValueError):
        ema_update(torch.zeros(2), torch.zeros(3))


def test_ema_class_warmup_and_first_step():
    net = torch.nn.Linear(3, 2)
    ema = EMA(net, 0.999)
    assert torch.equal(ema.flat(), torch.cat([p.detach().reshape(-1) for p in net.parameters()]))
    assert ema.effective_decay() == pytest.approx(0.1)
    ema.update(net)
    # initialized from the parameters, a step with unchanged parameters keeps them
    assert torch.allclose(ema.flat(), torch.cat([p.detach().reshape(-1) for p in net.parameters()]))
    ema.n_updates = 10_000
    assert ema.effective_decay() == 0.999
    assert EMA(net, 0.5, warmup=False).effective_decay() == 0.5


def test_analytic_score_examples():
    prior = GaussianPrior(1.0, 0.5)
    y, tau = 0.0, 0.4
    w = mean_weight(tau, CFG)
    marginal_mean = torch.tensor([w * prior.mean + (1 - w) * y])
    assert analytic_score(marginal_mean, tau, prior, y, CFG).abs().item() < 1e-12
    degenerate = GaussianPrior(1.0, 0.0)
    x = torch.tensor([0.3])
    mu = w * 1.0
    assert analytic_score(x, tau, degenerate, y, CFG).item() == pytest.approx(-(0.3 - mu) / kernel_var(tau, CFG))
    model = AnalyticGaussianScore(prior, y, CFG)
    assert model.score(x, None, None, tau).item() == analytic_score(x, tau, prior, y, CFG).item()


def test_analytic_marginal_variance_monte_carlo():
    prior = GaussianPrior(1.0, 0.5)
    rng = np.random.default_rng(0)
    tau = 0.6
    x0 = rng.normal(prior.mean, prior.std, 100_000)
    w = mean_weight(tau, CFG)
    x_tau = w * x0 + (1 - w) * 0.0 + np.sqrt(kernel_var(tau, CFG)) * rng.standard_normal(x0.size)
    var_theory = w * w * prior.std**2 + kernel_var(tau, CFG)
    assert x_tau.var() == pytest.approx(var_theory, rel=0.02)
