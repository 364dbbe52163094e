"""Input checks shared by the estimator API."""

from __future__ import annotations

import numpy as np

from .spectral import SAMPLE_RATE, Waveform


def check_waveform(x, name: str = "X") -> np.ndarray:
    """Return ``x`` as a finite, non-empty 1-D float64 array."""
    if isinstance(x, Waveform):
        if x.sample_rate != SAMPLE_RATE:
            raise ValueError(f"{name}: expected {SAMPLE_RATE} Hz audio, got {x.sample_rate}")
        x = x.samples
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected a mono 1-D waveform, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name}: empty waveform")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: waveform contains NaN or Inf")
    return arr


def check_waveforms(X, name: str = "X") -> list:
    """Accept one waveform or a sequence of waveforms; return a list of 1-D arrays."""
    if isinstance(X, Waveform) or (isinstance(X, np.ndarray) and X.ndim == 1):
        return [check_waveform(X, name)]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_waveform(row, f"{name}[{i}]") for i, row in enumerate(X)]
    try:
        items = list(X)
    except TypeError as exc:
        raise ValueError(f"{name}: expected a waveform or a sequence of waveforms") from exc
    if not items:
        raise ValueError(f"{name}: no waveforms given")
    return [check_waveform(x, f"{name}[{i}]") for i, x in enumerate(items)]


def check_paired(X, y) -> tuple[list, list]:
    """Validate noisy/clean lists of equal count with per-pair equal lengths."""
    X = check_waveforms(X, "X")
    y = check_waveforms(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} waveforms but y has {len(y)}")
    for i, (a, b) in enumerate(zip(X, y)):
        if len(a) != len(b):
            raise ValueError(f"pair {i}: noisy length {len(a)} != clean length {len(b)}")
    return X, y
