"""Score estimators s(x_tau, conditioning, sigma) and the denoising score matching loss."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import nn

from .nets import EncoderDecoder, channels_to_complex, complex_to_channels, count_parameters
from .sde import SdeConfig, kernel_mean, kernel_std, kernel_var, mean_weight, standard_noise


class ConditioningMode(str, enum.Enum):
    NOISY = "noisy"
    POST_DENOISER = "postdenoiser"
    BOTH = "both"

    @property
    def n_inputs(self) -> int:
        return 2 if self is ConditioningMode.BOTH else 1

    def stack(self, noisy: torch.Tensor, denoised: torch.Tensor) -> list[torch.Tensor]:
        if self is ConditioningMode.NOISY:
            return [noisy]
        if self is ConditioningMode.POST_DENOISER:
            return [denoised]
        return [noisy, denoised]


class ToyScoreNet(nn.Module):
    """Desk-scale score network.

    Real and imaginary channels of ``x_tau`` and of every conditioning
    spectrogram are stacked on the channel axis; ``sigma`` modulates each
    residual block through a scale-and-shift.  The network predicts the
    injected noise ``z`` and returns the score ``-z_hat / sigma``.

    With ``prior_ref`` set, the conditioning input at that index is taken to
    be the diffusion anchor, and ``z_hat`` starts from the exact posterior
    mean of ``z`` under a Gaussian prior ``x0 ~ N(anchor, prior_std^2)``.
    The convolutional part then only models the deviation from that prior.
    """

    def __init__(self, n_conditioning: int = 2, widths=(8, 16, 32, 64), emb_dim: int = 32, *,
                 prior_ref: int | None = None, prior_std: float = 0.4, gamma: float = SdeConfig.gamma):
        super().__init__()
        if prior_ref is not None and not -n_conditioning <= prior_ref < n_conditioning:
            raise ValueError(f"prior_ref {prior_ref} out of range for {n_conditioning} conditioning inputs")
        if prior_std <= 0:
            raise ValueError("prior_std must be positive")
        self.n_conditioning = n_conditioning
        self.widths = tuple(widths)
        self.emb_dim = emb_dim
        self.prior_ref = prior_ref
        self.prior_std = float(prior_std)
        self.gamma = float(gamma)
        self.net = EncoderDecoder(2 * (1 + n_conditioning), 2, widths, emb_dim)

    def arch(self) -> dict:
        return {"kind": "ToyScoreNet", "n_conditioning": self.n_conditioning,
                "widths": list(self.widths), "emb_dim": self.emb_dim,
                "prior_ref": self.prior_ref, "prior_std": self.prior_std, "gamma": self.gamma}

    @property
    def n_parameters(self) -> int:
        return count_parameters(self)

    def forward(self, x_tau, conditioning, sigma, tau=None):
        if len(conditioning) != self.n_conditioning:
            raise ValueError(f"expected {self.n_conditioning} conditioning inputs, got {len(conditioning)}")
        if self.prior_ref is not None and tau is None:
            raise ValueError("tau is required when the Gaussian prior skip is enabled")
        squeeze = x_tau.dim() == 2
        if squeeze:
            x_tau = x_tau[None]
            conditioning = [c[None] for c in conditioning]
        batch = x_tau.shape[0]
        real_dtype = x_tau.real.dtype
        sigma = torch.as_tensor(sigma, dtype=real_dtype)
        if sigma.dim() == 0:
            sigma = sigma.expand(batch)
        inp = torch.cat([complex_to_channels(t) for t in (x_tau, *conditioning)], dim=1)
        z_hat = channels_to_complex(self.net(inp, sigma))
        sig = sigma.view(-1, 1, 1)
        if self.prior_ref is not None:
            tau = torch.as_tensor(tau, dtype=real_dtype)
            w = torch.exp(-self.gamma * tau.expand(batch)).view(-1, 1, 1)
            # x_tau ~ N(anchor, w^2 prior_std^2 + sigma^2) under the prior
            z_hat = z_hat + sig * (x_tau - conditioning[self.prior_ref]) / (w * w * self.prior_std**2 + sig * sig)
        score = -z_hat / sig
        return score[0] if squeeze else score

    def score(self, x_tau, conditioning, sigma, tau=None):
        return self(x_tau, conditioning, sigma, tau)


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 1.0
    std: float = 0.5


def analytic_score(x_tau, tau: float, prior: GaussianPrior, y, cfg: SdeConfig = SdeConfig()):
    """Exact score of the OUVE marginal when x0 ~ N(prior.mean, prior.std^2) per bin."""
    w = mean_weight(tau, cfg)
    mean = w * prior.mean + (1.0 - w) * y
    var = w * w * prior.std**2 + kernel_var(tau, cfg)
    return -(x_tau - mean) / var


class AnalyticGaussianScore:
    """Score-model contract backed by :func:`analytic_score` (test oracle)."""

    def __init__(self, prior: GaussianPrior, y, cfg: SdeConfig = SdeConfig()):
        self.prior = prior
        self.y = y
        self.cfg = cfg

    def score(self, x_tau, conditioning, sigma, tau):
        return analytic_score(x_tau, tau, self.prior, self.y, self.cfg)


def sample_tau(batch: int, cfg: SdeConfig, generator: torch.Generator | None = None,
               dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(batch, generator=generator, dtype=dtype)
    return cfg.t_eps + (cfg.t_max - cfg.t_eps) * u


def perturb_batch(x0, anchor, cfg: SdeConfig, generator=None, *, tau=None, z=None):
    """Draw (tau, z, x_tau) for a batch of (B, F, T) spectrograms around ``anchor``."""
    real_dtype = x0.real.dtype
    if tau is None:
        tau = sample_tau(x0.shape[0], cfg, generator, dtype=real_dtype)
    if z is None:
        z = standard_noise(x0, generator)
    t = tau.view(-1, *([1] * (x0.dim() - 1)))
    sigma = kernel_std(tau, cfg)
    x_tau = kernel_mean(x0, anchor, t, cfg) + sigma.view_as(t) * z
    return tau, z, sigma, x_tau


def dsm_residual(score, z, sigma):
    return score + z / sigma.view(-1, *([1] * (z.dim() - 1)))


def dsm_loss(model, x0, y, conditioning, cfg: SdeConfig = SdeConfig(), generator=None, *,
             anchor=None, tau=None, z=None, backward: bool = False):
    """Denoising score matching loss, mean over batch and bins of |s + z/sigma|^2.

    ``anchor`` defaults to ``y``; StoRM passes the predictor output instead.
    With ``backward=True`` gradients are accumulated into the model parameters.
    """
    anchor = y if anchor is None else anchor
    if x0.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(y.shape)}")
    tau, z, sigma, x_tau = perturb_batch(x0, anchor, cfg, generator, tau=tau, z=z)
    score = model.score(x_tau, conditioning, sigma, tau)
    loss = dsm_residual(score, z, sigma).abs().pow(2).mean()
    if backward:
        loss.backward()
    return loss


def ema_update(shadow: torch.Tensor, params: torch.Tensor, decay: float = 0.999) -> torch.Tensor:
    if shadow.shape != params.shape:
        raise ValueError(f"EMA dimension mismatch: {tuple(shadow.shape)} vs {tuple(params.shape)}")
    return decay * shadow + (1.0 - decay) * params


class EMA:
    """Shadow copy of a module's parameters.

    The effective decay ramps up as min(decay, (1 + n) / (10 + n)) so short
    desk-scale runs are not dominated by the initial weights.
    """

    def __init__(self, module: nn.Module, decay: float = 0.999, warmup: bool = True):
        self.decay = decay
        self.warmup = warmup
        self.n_updates = 0
        self.shadow = [p.detach().clone() for p in module.parameters()]

    def effective_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1 + self.n_updates) / (10 + self.n_updates))

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        d = self.effective_decay()
        for s, p in zip(self.shadow, module.parameters()):
            s.copy_(ema_update(s, p.detach(), d))
        self.n_updates += 1

    def flat(self) -> torch.Tensor:
        return torch.cat([s.reshape(-1) for s in self.shadow])

    def load_flat(self, flat: torch.Tensor, n_updates: int) -> None:
        offset = 0
        for s in self.shadow:
            s.copy_(flat[offset : offset + s.numel()].view_as(s))
            offset += s.numel()
        self.n_updates = n_updates

    @torch.no_grad()
    def copy_to(self, module: nn.Module) -> None:
        for s, p in zip(self.shadow, module.parameters()):
            p.copy_(s)


