"""Initial predictors D(y): a trainable toy network and a non-learned spectral gate."""

from __future__ import annotations

import torch
from torch import nn

from .nets import EncoderDecoder, channels_to_complex, complex_to_channels, count_parameters


class PredictorError(RuntimeError):
    pass


class ToyPredictorNet(nn.Module):
    """Same backbone as the score network without any noise-level pathway.

    With ``residual=True`` the network output is added to ``y``, so an untrained
    predictor starts out close to the identity.
    """

    def __init__(self, widths=(8, 16, 32, 64), residual: bool = True):
        super().__init__()
        self.widths = tuple(widths)
        self.residual = residual
        self.net = EncoderDecoder(2, 2, widths, emb_dim=None)

    def arch(self) -> dict:
        return {"kind": "ToyPredictorNet", "widths": list(self.widths), "residual": self.residual}

    @property
    def n_parameters(self) -> int:
        return count_parameters(self)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        squeeze = y.dim() == 2
        if squeeze:
            y = y[None]
        out = channels_to_complex(self.net(complex_to_channels(y)))
        if self.residual:
            out = y + out
        return out[0] if squeeze else out

    def predict(self, y):
        return self(y)


class IdentityPredictor(nn.Module):
    """D(y) = y; turns StoRM inference into plain conditional generation."""

    def arch(self) -> dict:
        return {"kind": "IdentityPredictor"}

    def forward(self, y):
        return y

    def predict(self, y):
        return y


class OraclePredictor:
    """Returns a fixed target regardless of input (perfect-predictor tests)."""

    def __init__(self, target: torch.Tensor):
        self.target = target

    def predict(self, y):
        return self.target

    __call__ = predict


class SpectralGatePredictor:
    """Wiener-style magnitude gate from a minimum-statistics noise floor.

    Operates on warped spectrograms: magnitudes are un-warped to power,
    the noise power per frequency is the mean over the quietest
    ``quantile`` fraction of frames, and the amplitude gain
    ``max(floor, 1 - oversub * noise / power)`` is applied with the phase of
    ``y`` left untouched.
    """

    def __init__(self, floor: float = 0.1, oversub: float = 2.0, quantile: float = 0.1, warp_exponent: float = 0.5):
        if not 0 < floor <= 1:
            raise ValueError("floor must be in (0, 1]")
        self.floor = floor
        self.oversub = oversub
        self.quantile = quantile
        self.warp_exponent = warp_exponent

    def gain(self, y: torch.Tensor) -> torch.Tensor:
        power = y.abs().pow(2.0 / self.warp_exponent)
        frame_energy = power.sum(dim=-2)
        n_frames = power.shape[-1]
        k = max(1, int(round(self.quantile * n_frames)))
        idx = frame_energy.topk(k, dim=-1, largest=False).indices
        quiet = torch.gather(power, -1, idx.unsqueeze(-2).expand(*power.shape[:-1], k))
        noise = quiet.mean(dim=-1, keepdim=True)
        ratio = torch.where(power > 0, noise / power.clamp_min(1e-30), torch.zeros_like(power))
        return (1.0 - self.oversub * ratio).clamp(self.floor, 1.0)

    def predict(self, y: torch.Tensor) -> torch.Tensor:
        # amplitude gain G on the linear magnitude is G**exponent on the warped one
        return y * self.gain(y).pow(self.warp_exponent)

    __call__ = predict


def predict(D, y: torch.Tensor) -> torch.Tensor:
    """Run a predictor and check the result is usable."""
    out = D.predict(y) if hasattr(D, "predict") else D(y)
    if out.shape != y.shape:
        raise PredictorError(f"predictor changed shape {tuple(y.shape)} -> {tuple(out.shape)}")
    finite = torch.isfinite(torch.view_as_real(out)) if torch.is_complex(out) else torch.isfinite(out)
    if not finite.all():
        bad = int((~finite).sum())
        raise PredictorError(f"predictor produced {bad} non-finite values (input max |y| = {y.abs().max():.3g})")
    return out


def supervised_loss(D, x0: torch.Tensor, y: torch.Tensor, *, prediction=None, backward: bool = False):
    """Mean squared complex error between the target and D(y)."""
    if x0.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(y.shape)}")
    est = D(y) if prediction is None else prediction
    loss = (x0 - est).abs().pow(2).mean()
    if backward:
        loss.backward()
    return loss
