"""Ornstein-Uhlenbeck variance-exploding (OUVE) forward process.

States are torch tensors, complex for spectrograms or real for scalar toy
problems.  Complex noise is circularly symmetric with unit total variance per
bin (real and imaginary parts each have variance 1/2); real noise has unit
variance.  Every routine that draws noise goes through :func:`standard_noise`
so the convention stays consistent between kernel, loss and samplers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch


@dataclass(frozen=True)
class SdeConfig:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    t_max: float = 1.0
    t_eps: float = 0.03

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0 (got {self.gamma}); the kernel variance divides by gamma + log(sigma_max/sigma_min)")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if not 0 < self.t_eps < self.t_max:
            raise ValueError(f"need 0 < t_eps < t_max, got {self.t_eps}, {self.t_max}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def to_text(self) -> str:
        lines = ["# OUVE SDE parameters (defaults: gamma=1.5 sigma_min=0.05 sigma_max=0.5 t_max=1 t_eps=0.03)"]
        lines += [f"{k} = {v!r}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SdeConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown SDE parameter {key!r}")
            values[key] = float(value)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SdeConfig":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class DiffusionState:
    x: torch.Tensor
    tau: float


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def standard_noise(like: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Unit-variance noise shaped like ``like`` (complex: variance 1/2 per component)."""
    if torch.is_complex(like):
        real_dtype = torch.float64 if like.dtype == torch.complex128 else torch.float32
        parts = torch.randn((2,) + tuple(like.shape), generator=generator, dtype=real_dtype)
        return torch.complex(parts[0], parts[1]) / math.sqrt(2.0)
    return torch.randn(like.shape, generator=generator, dtype=like.dtype)


def drift(x, y_cond, cfg: SdeConfig = SdeConfig()):
    _check_same_shape(x, y_cond)
    return cfg.gamma * (y_cond - x)


def diffusion_coeff(tau: float, cfg: SdeConfig = SdeConfig()) -> float:
    return cfg.sigma_min * (cfg.sigma_max / cfg.sigma_min) ** tau * math.sqrt(2.0 * cfg.log_ratio)


def mean_weight(tau, cfg: SdeConfig = SdeConfig()):
    """Weight e^{-gamma tau} that the kernel mean keeps on the clean signal."""
    if isinstance(tau, torch.Tensor):
        return torch.exp(-cfg.gamma * tau)
    return np.exp(-cfg.gamma * np.asarray(tau, dtype=np.float64)) if np.ndim(tau) else math.exp(-cfg.gamma * tau)


def kernel_mean(x0, y, tau, cfg: SdeConfig = SdeConfig()):
    _check_same_shape(x0, y)
    w = mean_weight(tau, cfg)
    return w * x0 + (1.0 - w) * y


def kernel_var(tau, cfg: SdeConfig = SdeConfig()):
    """sigma(tau)^2; accepts floats, numpy arrays or torch tensors."""
    lr = cfg.log_ratio
    if isinstance(tau, torch.Tensor):
        growth = torch.exp(2.0 * lr * tau) - torch.exp(-2.0 * cfg.gamma * tau)
    else:
        tau = np.asarray(tau, dtype=np.float64)
        growth = np.exp(2.0 * lr * tau) - np.exp(-2.0 * cfg.gamma * tau)
        if growth.ndim == 0:
            growth = float(growth)
    return cfg.sigma_min**2 * growth * lr / (cfg.gamma + lr)


def kernel_std(tau, cfg: SdeConfig = SdeConfig()):
    var = kernel_var(tau, cfg)
    if isinstance(var, torch.Tensor):
        return var.clamp_min(0.0).sqrt()
    return np.sqrt(np.maximum(var, 0.0)) if np.ndim(var) else math.sqrt(max(var, 0.0))


def kernel_score(x_tau, x0, y, tau, cfg: SdeConfig = SdeConfig()):
    """Gradient of log p_{0,tau}(x_tau | x0, y); undefined at tau = 0."""
    return -(x_tau - kernel_mean(x0, y, tau, cfg)) / kernel_var(tau, cfg)


def sample_perturbed(x0, y, tau: float, generator: torch.Generator | None = None,
                     cfg: SdeConfig = SdeConfig()) -> DiffusionState:
    mean = kernel_mean(x0, y, tau, cfg)
    std = kernel_std(tau, cfg)
    if std == 0.0:
        return DiffusionState(mean, float(tau))
    return DiffusionState(mean + std * standard_noise(mean, generator), float(tau))


def terminal_mismatch(cfg: SdeConfig = SdeConfig()) -> float:
    """Residual weight e^{-gamma T} of x0 in the mean at the final diffusion time.

    The reverse process starts from the anchor, so this is the bias that remains
    even with a perfect score.
    """
    return math.exp(-cfg.gamma * cfg.t_max)


def forward_simulate(x0, y, n_steps: int, generator: torch.Generator | None = None,
                     cfg: SdeConfig = SdeConfig(), *, noise: bool = True,
                     t_end: float | None = None, keep_path: bool = True):
    """Euler-Maruyama integration of the forward SDE (test oracle, not a production path).

    Returns the list of visited states (or only the terminal one when
    ``keep_path`` is false).  ``noise=False`` drops the diffusion term.
    """
    if n_steps < 100:
        raise ValueError("forward_simulate needs at least 100 steps")
    _check_same_shape(x0, y)
    t_end = cfg.t_max if t_end is None else t_end
    dt = t_end / n_steps
    x = x0.clone()
    path = [DiffusionState(x.clone(), 0.0)] if keep_path else []
    for n in range(n_steps):
        tau = n * dt
        x = x + cfg.gamma * (y - x) * dt
        if noise:
            x = x + diffusion_coeff(tau, cfg) * math.sqrt(dt) * standard_noise(x, generator)
        if keep_path:
            path.append(DiffusionState(x.clone(), (n + 1) * dt))
    return path if keep_path else DiffusionState(x, t_end)
