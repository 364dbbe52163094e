"""Independent reference computations used to check the production numerics.

Nothing here imports the closed-form kernel or the sampler internals it is
meant to check: drift and diffusion are re-derived from the raw config
fields and integrated with plain numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    name: str
    value: float
    reference: float
    tolerance: float
    relative: bool = True

    @property
    def error(self) -> float:
        diff = abs(self.value - self.reference)
        return diff / abs(self.reference) if self.relative and self.reference != 0 else diff

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def line(self) -> str:
        kind = "rel" if self.relative else "abs"
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: value={self.value:.6g} reference={self.reference:.6g} "
                f"{kind}_err={self.error:.3g} tol={self.tolerance:g}")


def _g_squared(tau, gamma, sigma_min, sigma_max):
    ratio = sigma_max / sigma_min
    return (sigma_min * ratio**tau) ** 2 * 2.0 * math.log(ratio)


def ode_moments(cfg, taus, dt: float = 1e-4):
    """RK4 integration of the mean weight and variance ODEs.

    d w / d tau = -gamma w            (w(0) = 1; mean = w x0 + (1 - w) y)
    d v / d tau = -2 gamma v + g(tau)^2   (v(0) = 0)

    Returns ``(weights, variances)`` evaluated at ``taus``.
    """
    if dt > 1e-4:
        raise ValueError("ode_moments requires dt <= 1e-4")
    gamma, smin, smax = cfg.gamma, cfg.sigma_min, cfg.sigma_max
    taus = np.asarray(taus, dtype=np.float64)
    order = np.argsort(taus)
    out_w = np.empty_like(taus)
    out_v = np.empty_like(taus)

    def f(t, state):
        w, v = state
        return np.array([-gamma * w, -2.0 * gamma * v + _g_squared(t, gamma, smin, smax)])

    t, state = 0.0, np.array([1.0, 0.0])
    for i in order:
        target = taus[i]
        n = int(math.ceil((target - t) / dt - 1e-9))
        h = (target - t) / n if n > 0 else 0.0
        for _ in range(n):
            k1 = f(t, state)
            k2 = f(t + h / 2, state + h / 2 * k1)
            k3 = f(t + h / 2, state + h / 2 * k2)
            k4 = f(t + h, state + h * k3)
            state = state + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        t = target
        out_w[i], out_v[i] = state
    return out_w, out_v


@dataclass
class MonteCarloStats:
    mean: float
    std: float
    se_mean: float
    se_std: float
    n_paths: int


def mc_kernel(cfg, x0: float, y: float, tau: float, n_paths: int = 10_000, dt: float = 1e-3,
              seed: int = 0) -> MonteCarloStats:
    """Euler-Maruyama ensemble of the scalar real forward SDE up to ``tau``."""
    if n_paths < 10_000:
        raise ValueError("mc_kernel needs at least 1e4 paths")
    rng = np.random.default_rng(seed)
    n_steps = int(round(tau / dt))
    h = tau / n_steps
    x = np.full(n_paths, float(x0))
    for k in range(n_steps):
        t = k * h
        g = math.sqrt(_g_squared(t, cfg.gamma, cfg.sigma_min, cfg.sigma_max))
        x = x + cfg.gamma * (y - x) * h + g * math.sqrt(h) * rng.standard_normal(n_paths)
    std = float(np.std(x, ddof=1))
    return MonteCarloStats(float(np.mean(x)), std, std / math.sqrt(n_paths), std / math.sqrt(2 * (n_paths - 1)), n_paths)


def fd_gradient(loss_fn, params, indices, h: float | None = None) -> np.ndarray:
    """Central finite differences of ``loss_fn(params)`` at the given indices.

    ``params`` is a 1-D float64 array (or tensor) that is perturbed in place
    and restored; ``h`` defaults to 1e-5 * max(1, |p|).
    """
    grads = np.empty(len(indices))
    for j, i in enumerate(indices):
        p = float(params[i])
        step = h if h is not None else 1e-5 * max(1.0, abs(p))
        params[i] = p + step
        up = float(loss_fn(params))
        params[i] = p - step
        down = float(loss_fn(params))
        params[i] = p
        grads[j] = (up - down) / (2 * step)
    return grads


def gaussian_reverse_recovery(cfg, prior_mean: float, prior_std: float, y: float, sampler_cfg,
                              n_chains: int = 100_000, seed: int = 0):
    """Run the production sampler with the exact Gaussian score and compare to the prior."""
    import torch

    from .sampler import pc_sample
    from .score_model import AnalyticGaussianScore, GaussianPrior

    model = AnalyticGaussianScore(GaussianPrior(prior_mean, prior_std), y, cfg)
    anchor = torch.full((n_chains,), float(y), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    x, counter = pc_sample(model, anchor, None, cfg, sampler_cfg, gen)
    x = x.numpy()
    return float(np.mean(x)), float(np.std(x)), counter


def kernel_reports(cfg, taus=(0.25, 0.5, 1.0), n_paths: int = 10_000, dt: float = 1e-3, seed: int = 0,
                   x0: float = 1.0, y: float = 0.0, mean_tol: float = 0.01, std_tol: float = 0.02):
    """Monte-Carlo and ODE checks of the closed-form kernel over a tau grid."""
    from .sde import kernel_mean, kernel_std  # closed form under test

    reports = []
    w_ode, v_ode = ode_moments(cfg, np.asarray(taus))
    for i, tau in enumerate(taus):
        stats = mc_kernel(cfg, x0, y, tau, n_paths, dt, seed + i)
        mean_cf = float(kernel_mean(np.array([x0]), np.array([y]), tau, cfg)[0])
        std_cf = float(kernel_std(tau, cfg))
        scale = abs(y - x0)
        reports.append(OracleReport(f"mc_mean(tau={tau})", stats.mean / scale, mean_cf / scale, mean_tol, relative=False))
        reports.append(OracleReport(f"mc_std(tau={tau})", stats.std, std_cf, std_tol))
        reports.append(OracleReport(f"ode_std(tau={tau})", math.sqrt(v_ode[i]), std_cf, 1e-6))
    return reports


def gradient_check(params, loss_fn, n_indices: int = 100, seed: int = 0, h: float | None = None):
    """Autograd versus central differences on random parameter entries.

    ``params`` is a list of float64 tensors requiring grad and ``loss_fn()``
    returns a scalar tensor built from them.  Returns ``(relative_errors,
    analytic, numeric)`` for the sampled entries; entries where both
    gradients are below 1e-10 of the largest analytic entry count as exact.
    """
    import torch

    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    indices = rng.choice(total, size=min(n_indices, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    class _View:
        # flat index -> in-place access into the parameter list
        def __getitem__(self, i):
            k = int(np.searchsorted(offsets, i, side="right") - 1)
            return params[k].detach().reshape(-1)[i - offsets[k]].item()

        def __setitem__(self, i, value):
            k = int(np.searchsorted(offsets, i, side="right") - 1)
            with torch.no_grad():
                params[k].view(-1)[i - offsets[k]] = value

    with torch.no_grad():
        numeric = fd_gradient(lambda _: float(loss_fn()), _View(), indices, h)
    a = analytic[indices]
    scale = np.maximum(np.abs(a), np.abs(numeric))
    floor = 1e-10 * max(np.abs(analytic).max(), 1e-300)
    rel = np.where(scale > floor, np.abs(a - numeric) / np.maximum(scale, floor), 0.0)
    return rel, a, numeric
