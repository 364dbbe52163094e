"""Small convolutional encoder-decoder shared by the score and predictor networks."""

from __future__ import annotations


import torch
from torch import nn
import torch.nn.functional as F


def complex_to_channels(x: torch.Tensor) -> torch.Tensor:
    """(B, F, T) complex -> (B, 2, F, T) real."""
    return torch.stack([x.real, x.imag], dim=1)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    return torch.complex(x[:, 0], x[:, 1])


class NoiseEmbedding(nn.Module):
    """Fourier features of log(sigma) followed by a two-layer MLP."""

    def __init__(self, dim: int, n_freqs: int = 8):
        super().__init__()
        self.register_buffer("freqs", 2.0 ** torch.arange(n_freqs, dtype=torch.float32) * 0.5)
        self.mlp = nn.Sequential(nn.Linear(2 * n_freqs, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        arg = torch.log(sigma)[:, None] * self.freqs.to(sigma.dtype)[None]
        return self.mlp(torch.cat([torch.sin(arg), torch.cos(arg)], dim=1))


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int | None):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        # per-feature scale and shift from the noise embedding
        self.film = nn.Linear(emb_dim, 2 * ch) if emb_dim else None

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(x))
        if self.film is not None:
            scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return x + h


class EncoderDecoder(nn.Module):
    """U-shaped conv net over stacked real/imaginary channels.

    ``widths`` gives the channel count per resolution level; each level below
    the first halves frequency and time.  Inputs are padded in time to a
    multiple of ``2 ** (len(widths) - 1)`` and cropped back.
    """

    def __init__(self, in_ch: int, out_ch: int = 2, widths=(16, 32, 64), emb_dim: int | None = 32):
        super().__init__()
        self.widths = tuple(widths)
        self.emb = NoiseEmbedding(emb_dim) if emb_dim else None
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(w, emb_dim) for w in widths])
        self.down = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(len(widths) - 1)]
        )
        self.up = nn.ModuleList([nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(len(widths) - 1)])
        self.dec = nn.ModuleList([ResBlock(w, emb_dim) for w in widths[:-1]])
        self.head = nn.Conv2d(widths[0], out_ch, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x: torch.Tensor, sigma: torch.Tensor | None = None) -> torch.Tensor:
        n_freq, n_time = x.shape[-2:]
        pad_f = (-n_freq) % self.multiple
        pad_t = (-n_time) % self.multiple
        if pad_f or pad_t:
            x = F.pad(x, (0, pad_t, 0, pad_f))
        emb = self.emb(sigma) if self.emb is not None else None
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        for i in reversed(range(len(self.dec))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[i](h) + skips[i]
            h = self.dec[i](h, emb)
        out = self.head(F.silu(h))
        return out[..., :n_freq, :n_time]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def set_flat_parameters(module: nn.Module, flat: torch.Tensor) -> None:
    needed = count_parameters(module)
    if flat.numel() != needed:
        raise ValueError(f"parameter vector has {flat.numel()} entries, model needs {needed}")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(flat[offset : offset + n].view_as(p))
            offset += n


def flat_gradients(module: nn.Module) -> torch.Tensor:
    return torch.cat(
        [(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in module.parameters()]
    )


