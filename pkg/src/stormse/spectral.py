"""Waveform <-> warped complex spectrogram conversion and WAV I/O."""

from __future__ import annotations

import dataclasses
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 510
    hop: int = 128
    window: str = "sqrt-hann"
    padding_mode: str = "reflect"

    @property
    def freq_bins(self) -> int:
        return self.window_len // 2 + 1

    def window_tensor(self, dtype=torch.float64) -> torch.Tensor:
        if self.window != "sqrt-hann":
            raise ValueError(f"unsupported window {self.window!r}")
        return torch.hann_window(self.window_len, periodic=True, dtype=dtype).sqrt()

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Complex (freq_bins, frames) matrix plus warping/normalization bookkeeping."""

    bins: torch.Tensor
    warped: bool = False
    norm_factor: float = 1.0

    def __post_init__(self):
        if not torch.is_complex(self.bins):
            raise TypeError("spectrogram bins must be a complex tensor")
        if not self.norm_factor > 0:
            raise ValueError(f"norm_factor must be positive, got {self.norm_factor}")

    @property
    def shape(self):
        return tuple(self.bins.shape)

    @property
    def n_frames(self) -> int:
        return self.bins.shape[-1]

    def replace(self, **changes) -> "ComplexSpectrogram":
        return dataclasses.replace(self, **changes)


def check_finite_waveform(w: Waveform) -> None:
    if len(w) == 0:
        raise ValueError("empty waveform")
    if not np.all(np.isfinite(w.samples)):
        raise ValueError("waveform contains non-finite samples")
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")


def stft(w: Waveform, cfg: StftConfig = StftConfig(), dtype=torch.complex64) -> ComplexSpectrogram:
    check_finite_waveform(w)
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    x = torch.as_tensor(w.samples, dtype=real_dtype)
    pad = cfg.window_len // 2
    if x.shape[0] <= pad:
        # reflect padding needs more samples than the pad width
        x_padded = torch.nn.functional.pad(x[None, None], (pad, pad), mode="constant")[0, 0]
    else:
        x_padded = torch.nn.functional.pad(x[None, None], (pad, pad), mode=cfg.padding_mode)[0, 0]
    spec = torch.stft(
        x_padded,
        n_fft=cfg.window_len,
        hop_length=cfg.hop,
        window=cfg.window_tensor(real_dtype),
        center=False,
        return_complex=True,
    )
    expected = cfg.n_frames(len(w))
    return ComplexSpectrogram(spec[:, :expected].to(dtype))


def istft(s: ComplexSpectrogram, out_len: int, cfg: StftConfig = StftConfig()) -> Waveform:
    if s.warped:
        raise ValueError("istft expects an un-warped spectrogram; call remove_warping first")
    bins = s.bins
    real_dtype = torch.float64 if bins.dtype == torch.complex128 else torch.float32
    n_frames = bins.shape[-1]
    # istft needs enough frames to cover out_len; pad with silence if a crop was shortened
    needed = cfg.n_frames(out_len)
    if n_frames < needed:
        bins = torch.nn.functional.pad(bins, (0, needed - n_frames))
    x = torch.istft(
        bins,
        n_fft=cfg.window_len,
        hop_length=cfg.hop,
        window=cfg.window_tensor(real_dtype),
        center=True,
        length=out_len,
    )
    return Waveform(x.detach().cpu().numpy().astype(np.float64))


def apply_warping(s: ComplexSpectrogram, exponent: float = 0.5) -> ComplexSpectrogram:
    if s.warped:
        raise ValueError("spectrogram is already warped")
    return s.replace(bins=_warp(s.bins, exponent), warped=True)


def remove_warping(s: ComplexSpectrogram, exponent: float = 0.5) -> ComplexSpectrogram:
    if not s.warped:
        raise ValueError("spectrogram is not warped")
    return s.replace(bins=_warp(s.bins, 1.0 / exponent), warped=False)


def _warp(bins: torch.Tensor, exponent: float) -> torch.Tensor:
    mag = bins.abs()
    # angle() of 0 is 0, so zero bins stay zero
    return torch.polar(mag.pow(exponent), bins.angle())


def normalize(clean: Waveform, noisy: Waveform) -> tuple[Waveform, Waveform, float]:
    """Scale a (clean, noisy) pair by the peak of the noisy waveform.

    The STFT is linear, so scaling the waveforms before the transform is the same
    as scaling both spectrograms afterwards.
    """
    factor = noisy.peak
    if not factor > 0:
        raise ValueError("cannot normalize: noisy utterance is all zeros")
    return (
        Waveform(clean.samples / factor, clean.sample_rate),
        Waveform(noisy.samples / factor, noisy.sample_rate),
        factor,
    )


def denormalize(w: Waveform, factor: float) -> Waveform:
    return Waveform(w.samples * factor, w.sample_rate)


def random_crop(
    s: ComplexSpectrogram | torch.Tensor,
    frames: int = 256,
    rng: np.random.Generator | int | None = None,
    *,
    offset: int | None = None,
):
    """Crop (or right-pad with zeros) the last axis to exactly ``frames`` frames.

    Pass the returned offset to crop a paired spectrogram identically.
    Returns ``(cropped, offset)``.
    """
    bins = s.bins if isinstance(s, ComplexSpectrogram) else s
    n = bins.shape[-1]
    if n <= frames:
        out = torch.nn.functional.pad(bins, (0, frames - n))
        offset = 0
    else:
        if offset is None:
            rng = np.random.default_rng(rng)
            offset = int(rng.integers(0, n - frames + 1))
        out = bins[..., offset : offset + frames]
    if isinstance(s, ComplexSpectrogram):
        out = s.replace(bins=out)
    return out, offset


def to_warped_spectrogram(w: Waveform, norm_factor: float = 1.0, cfg: StftConfig = StftConfig(),
                          dtype=torch.complex64) -> ComplexSpectrogram:
    """stft + warp of an already-normalized waveform, carrying ``norm_factor`` along."""
    spec = stft(w, cfg, dtype=dtype).replace(norm_factor=norm_factor)
    return apply_warping(spec)


def to_waveform(s: ComplexSpectrogram, out_len: int, cfg: StftConfig = StftConfig()) -> Waveform:
    """Inverse of :func:`to_warped_spectrogram` including de-normalization."""
    if s.warped:
        s = remove_warping(s)
    return denormalize(istft(s, out_len, cfg), s.norm_factor)


# --- WAV I/O (16-bit PCM mono, 16 kHz) ---------------------------------------


def read_wav(path) -> Waveform:
    path = Path(path)
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit samples")
        if f.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()} Hz (no resampling)")
        if f.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV ({f.getcomptype()}) not supported")
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, SAMPLE_RATE)


def write_wav(path, w: Waveform) -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"only {SAMPLE_RATE} Hz output is supported")
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
