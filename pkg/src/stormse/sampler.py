"""Reverse-time predictor-corrector sampling for the OUVE process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .sde import DiffusionState, SdeConfig, diffusion_coeff, kernel_std, standard_noise

SCHEMES = ("euler-maruyama", "predictor-corrector")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    use_corrector: bool = True
    corrector_steps: int = 1
    r: float = 0.5
    scheme: str = "predictor-corrector"
    noise_last_step: bool = True
    # "reconciled" follows the reverse SDE; "literal" drops g^2 from the score
    # term and keeps the forward drift sign.  It exists for comparison only.
    em_variant: str = "reconciled"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.corrector_steps < 0:
            raise ValueError("corrector_steps must be >= 0")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.em_variant not in ("reconciled", "literal"):
            raise ValueError("em_variant must be 'reconciled' or 'literal'")

    @property
    def corrector_active(self) -> bool:
        return self.scheme == "predictor-corrector" and self.use_corrector and self.corrector_steps > 0

    @property
    def calls_per_step(self) -> int:
        return 1 + (self.corrector_steps if self.corrector_active else 0)

    def tau_grid(self, cfg: SdeConfig = SdeConfig()) -> list[float]:
        """Diffusion times visited by the loop, from T down to T/N."""
        return [cfg.t_max * n / self.n_steps for n in range(self.n_steps, 0, -1)]


@dataclass
class CallCounter:
    score_calls: int = 0
    predictor_calls: int = 0

    def merge(self, other: "CallCounter") -> "CallCounter":
        return CallCounter(self.score_calls + other.score_calls, self.predictor_calls + other.predictor_calls)

    def as_dict(self):
        return {"score_calls": self.score_calls, "predictor_calls": self.predictor_calls}


def init_reverse_state(anchor: torch.Tensor, cfg: SdeConfig = SdeConfig(),
                       generator: torch.Generator | None = None, *, sigma: float | None = None) -> DiffusionState:
    sigma_T = kernel_std(cfg.t_max, cfg) if sigma is None else sigma
    if sigma_T == 0:
        return DiffusionState(anchor.clone(), cfg.t_max)
    return DiffusionState(anchor + sigma_T * standard_noise(anchor, generator), cfg.t_max)


def em_step(state: DiffusionState, score: torch.Tensor, anchor: torch.Tensor, dt: float,
            cfg: SdeConfig = SdeConfig(), generator: torch.Generator | None = None, *,
            g: float | None = None, add_noise: bool = True, variant: str = "reconciled") -> DiffusionState:
    """One reverse Euler-Maruyama step from tau to tau - dt.

    x <- x + [-f(x, anchor) + g^2 score] dt + g sqrt(dt) w,  f = gamma (anchor - x).
    """
    x, tau = state.x, state.tau
    if tau < dt - 1e-12:
        raise ValueError(f"cannot step below zero: tau={tau}, dt={dt}")
    g = diffusion_coeff(tau, cfg) if g is None else g
    if variant == "reconciled":
        x_next = x + (-cfg.gamma * (anchor - x) + g * g * score) * dt
    elif variant == "literal":
        x_next = x - score * dt + cfg.gamma * (anchor - x) * dt
    else:
        raise ValueError(f"unknown EM variant {variant!r}")
    if add_noise and g != 0:
        x_next = x_next + g * math.sqrt(dt) * standard_noise(x, generator)
    return DiffusionState(x_next, max(tau - dt, 0.0))


def ald_correct(state: DiffusionState, score: torch.Tensor, sigma: float, r: float,
                generator: torch.Generator | None = None, *, noise: torch.Tensor | None = None) -> DiffusionState:
    """Annealed Langevin correction x <- x + 2 r^2 sigma^2 score + 2 r sigma w_c."""
    w = standard_noise(state.x, generator) if noise is None else noise
    x = state.x + 2.0 * r * r * sigma * sigma * score + 2.0 * r * sigma * w
    return DiffusionState(x, state.tau)


def _check_finite(x: torch.Tensor, step: int, where: str):
    if not torch.isfinite(torch.view_as_real(x) if torch.is_complex(x) else x).all():
        raise SamplingError(f"non-finite state at step {step} ({where})")


def pc_sample(score_model, anchor: torch.Tensor, conditioning, sde_cfg: SdeConfig = SdeConfig(),
              sampler_cfg: SamplerConfig = SamplerConfig(), generator: torch.Generator | None = None, *,
              x_init: torch.Tensor | None = None, counter: CallCounter | None = None, trace=None):
    """Run the reverse predictor-corrector loop from tau = T down to 0.

    ``score_model`` must provide ``score(x_tau, conditioning, sigma, tau)``.
    Returns ``(x_0, counter)``.  ``trace`` (a list) receives ``(tau, x)`` after
    every iteration when given.
    """
    counter = CallCounter() if counter is None else counter
    if sampler_cfg.em_variant != "reconciled":
        raise ValueError("only the reconciled EM update is supported for sampling")
    if x_init is None:
        state = init_reverse_state(anchor, sde_cfg, generator)
    else:
        state = DiffusionState(x_init, sde_cfg.t_max)
    dt = sde_cfg.t_max / sampler_cfg.n_steps
    grid = sampler_cfg.tau_grid(sde_cfg)
    with torch.no_grad():
        for i, tau in enumerate(grid):
            step = sampler_cfg.n_steps - i
            state = DiffusionState(state.x, tau)
            sigma = kernel_std(tau, sde_cfg)
            if sampler_cfg.corrector_active:
                for _ in range(sampler_cfg.corrector_steps):
                    score = score_model.score(state.x, conditioning, sigma, tau)
                    counter.score_calls += 1
                    state = ald_correct(state, score, sigma, sampler_cfg.r, generator)
                    _check_finite(state.x, step, "corrector")
            score = score_model.score(state.x, conditioning, sigma, tau)
            counter.score_calls += 1
            last = i == len(grid) - 1
            state = em_step(state, score, anchor, dt, sde_cfg, generator,
                            add_noise=sampler_cfg.noise_last_step or not last)
            _check_finite(state.x, step, "predictor")
            if trace is not None:
                trace.append((state.tau, state.x.clone()))
    return state.x, counter
