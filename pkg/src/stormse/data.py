"""Synthetic speech-like data, corruption models and paired manifests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .spectral import SAMPLE_RATE, Waveform, read_wav, write_wav

MANIFEST_SCHEMA = "stormse.manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "valid", "test")
SNR_RANGE = (-6.0, 14.0)
T60_RANGE = (0.4, 1.0)


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def synth_clean(rng, duration_s: float = 3.0, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Voiced-speech stand-in: harmonics of a wandering f0 with syllabic envelope and pauses."""
    if not 1.0 <= duration_s <= 6.0:
        raise ValueError("duration must be within [1, 6] s")
    rng = _rng(rng)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # log-f0 random walk on a 50 ms control grid, reflected into [80, 300] Hz
    n_ctrl = int(duration_s / 0.05) + 2
    log_f0 = np.log(rng.uniform(100.0, 250.0)) + np.cumsum(rng.normal(0.0, 0.04, n_ctrl))
    lo, hi = np.log(80.0), np.log(300.0)
    width = hi - lo
    log_f0 = lo + width - np.abs(np.mod(log_f0 - lo, 2 * width) - width)
    f0 = np.exp(np.interp(t, np.linspace(0.0, t[-1], n_ctrl), log_f0))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_harm = int(rng.integers(3, 9))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = rng.uniform(0.5, 1.0) / k
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    rate = rng.uniform(2.0, 8.0)
    envelope = 0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    x *= 0.15 + 0.85 * envelope

    # pauses covering roughly a fifth of the utterance, with 10 ms ramps
    gate = np.ones(n)
    n_gaps = int(rng.integers(2, 4))
    gap_len = int(0.2 * n / n_gaps)
    ramp = int(0.01 * sample_rate)
    segment = n // n_gaps
    for g in range(n_gaps):
        start = g * segment + int(rng.integers(0, max(1, segment - gap_len)))
        stop = min(n, start + gap_len)
        gate[start:stop] = 0.0
        fade = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        lo_i = max(0, start - ramp)
        gate[lo_i:start] *= fade[::-1][: start - lo_i]
        hi_i = min(n, stop + ramp)
        gate[stop:hi_i] *= fade[: hi_i - stop]
    x *= gate
    return Waveform(0.9 * x / np.max(np.abs(x)), sample_rate)


def white_noise(rng, n: int) -> np.ndarray:
    return _rng(rng).standard_normal(n)


def pink_noise(rng, n: int) -> np.ndarray:
    spec = np.fft.rfft(_rng(rng).standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.std(x)


def _fit_length(noise: np.ndarray, n: int, rng) -> np.ndarray:
    if len(noise) >= n:
        start = int(_rng(rng).integers(0, len(noise) - n + 1)) if len(noise) > n else 0
        return noise[start : start + n]
    reps = math.ceil(n / len(noise))
    return np.tile(noise, reps)[:n]


def mix_at_snr(clean: Waveform, noise: Waveform | np.ndarray, snr_db: float, rng=None):
    """Scale ``noise`` so that the clean/noise energy ratio equals ``snr_db``.

    Returns ``(noisy, scaled_noise)``.
    """
    noise = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    e_clean = float(np.sum(clean.samples**2))
    if e_clean == 0:
        raise ValueError("cannot mix at an SNR with a silent clean signal")
    noise = _fit_length(noise, len(clean), rng)
    e_noise = float(np.sum(noise**2))
    if e_noise == 0:
        raise ValueError("noise signal is silent")
    scale = math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    scaled = noise * scale
    return Waveform(clean.samples + scaled, clean.sample_rate), Waveform(scaled, clean.sample_rate)


def measured_snr(clean: Waveform, noise: Waveform) -> float:
    return 10.0 * math.log10(np.sum(clean.samples**2) / np.sum(noise.samples**2))


@dataclass
class SyntheticRir:
    h: np.ndarray
    t60: float
    direct_index: int
    sample_rate: int = SAMPLE_RATE


def synth_rir(rng, t60_s: float, sample_rate: int = SAMPLE_RATE, *, drr_db: float = -6.0,
              direct_index: int = 16, predelay_s: float = 0.0025) -> SyntheticRir:
    """Direct-path impulse followed by an exponentially decaying Gaussian tail.

    The tail amplitude decays at 3 ln(10) / t60 per second (60 dB energy decay
    over t60); its total energy is set by the direct-to-reverberant ratio.
    """
    if not 0.1 <= t60_s <= 1.5:
        raise ValueError("t60 must be within [0.1, 1.5] s")
    rng = _rng(rng)
    n = direct_index + int(math.ceil(1.5 * t60_s * sample_rate))
    h = np.zeros(n)
    h[direct_index] = 1.0
    start = direct_index + max(1, int(predelay_s * sample_rate))
    t = np.arange(n - start) / sample_rate
    decay = 3.0 * math.log(10.0) / t60_s
    tail = rng.standard_normal(n - start) * np.exp(-decay * t)
    tail *= math.sqrt(10.0 ** (-drr_db / 10.0) / np.sum(tail**2))
    h[start:] = np.clip(tail, -0.95, 0.95)
    return SyntheticRir(h, t60_s, direct_index, sample_rate)


def schroeder_t60(h: np.ndarray, sample_rate: int = SAMPLE_RATE, fit_range=(-5.0, -35.0)) -> float:
    """Reverberation time from a linear fit to the backward-integrated energy decay."""
    edc = np.cumsum((h**2)[::-1])[::-1]
    edc_db = 10.0 * np.log10(edc / edc[0] + 1e-300)
    hi, lo = fit_range
    idx = np.where((edc_db <= hi) & (edc_db >= lo))[0]
    if len(idx) < 2:
        raise ValueError("decay curve does not span the fit range")
    slope, _ = np.polyfit(idx / sample_rate, edc_db[idx], 1)
    return -60.0 / slope


def reverberate(clean: Waveform, rir: SyntheticRir) -> tuple[Waveform, Waveform]:
    """Return ``(reverberant, direct_path_target)``, both aligned and of the clean length."""
    n = len(clean)
    wet = signal.fftconvolve(clean.samples, rir.h)[:n]
    d = rir.direct_index
    target = np.concatenate([np.zeros(d), clean.samples[: n - d]]) * rir.h[d]
    return Waveform(wet, clean.sample_rate), Waveform(target, clean.sample_rate)


@dataclass
class ManifestRow:
    id: str
    clean_path: str
    corrupt_path: str
    split: str
    noise_path: str | None = None
    snr_db: float | None = None
    rir_id: str | None = None
    t60: float | None = None
    n_samples: int | None = None


@dataclass
class DatasetManifest:
    rows: list
    task: str = "denoise"
    seed: int | None = None
    root: Path | None = None

    def split(self, name: str) -> list:
        return [r for r in self.rows if r.split == name]

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self) -> None:
        ids = [r.id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        for r in self.rows:
            if r.split not in SPLITS:
                raise ValueError(f"row {r.id}: unknown split {r.split!r}")
            for p in (r.clean_path, r.corrupt_path, r.noise_path):
                if p is not None and not self.resolve(p).exists():
                    raise FileNotFoundError(f"row {r.id}: missing file {p}")

    def write(self, path) -> None:
        path = Path(path)
        header = {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION, "task": self.task, "seed": self.seed}
        with open(path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for r in self.rows:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not lines or lines[0].get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: not a {MANIFEST_SCHEMA} file")
        if lines[0].get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {lines[0].get('version')}")
        rows = [ManifestRow(**rec) for rec in lines[1:]]
        return cls(rows, lines[0].get("task", "denoise"), lines[0].get("seed"), path.parent)

    def load(self, row: ManifestRow):
        """Return ``(clean, corrupt, noise_or_None)`` waveforms for a row."""
        clean = read_wav(self.resolve(row.clean_path))
        corrupt = read_wav(self.resolve(row.corrupt_path))
        noise = read_wav(self.resolve(row.noise_path)) if row.noise_path else None
        return clean, corrupt, noise


def utterance_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, index]))


def make_pair(task: str, rng, duration_range=(2.0, 4.0)):
    """Generate one (clean, corrupt, noise, info) example for ``task``."""
    rng = _rng(rng)
    duration = round(float(rng.uniform(*duration_range)), 3)
    clean = synth_clean(rng, duration)
    if task == "denoise":
        snr = float(rng.uniform(*SNR_RANGE))
        kind = "white" if rng.random() < 0.5 else "pink"
        raw = white_noise(rng, len(clean)) if kind == "white" else pink_noise(rng, len(clean))
        # remove the chance correlation with the clean signal so that the
        # mixture's SI-SDR equals the drawn SNR
        raw = raw - np.dot(raw, clean.samples) / np.dot(clean.samples, clean.samples) * clean.samples
        noisy, noise = mix_at_snr(clean, raw, snr, rng)
        peak = max(noisy.peak, clean.peak)
        g = 0.95 / peak if peak > 0.95 else 1.0
        return (Waveform(clean.samples * g), Waveform(noisy.samples * g), Waveform(noise.samples * g),
                {"snr_db": snr, "noise_kind": kind})
    if task == "dereverb":
        t60 = float(rng.uniform(*T60_RANGE))
        rir = synth_rir(rng, t60)
        wet, target = reverberate(clean, rir)
        peak = max(wet.peak, target.peak)
        g = 0.95 / peak if peak > 0.95 else 1.0
        return Waveform(target.samples * g), Waveform(wet.samples * g), None, {"t60": t60}
    raise ValueError(f"unknown task {task!r}")


def make_dataset(task: str, out_dir, n_train: int = 500, n_valid: int = 50, n_test: int = 50,
                 seed: int = 0, duration_range=(2.0, 4.0)) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    index = 0
    for split, count in zip(SPLITS, (n_train, n_valid, n_test)):
        for _ in range(count):
            uid = f"{split}_{index:05d}"
            clean, corrupt, noise, info = make_pair(task, utterance_rng(seed, index), duration_range)
            row = ManifestRow(id=uid, clean_path=f"clean/{uid}.wav", corrupt_path=f"corrupt/{uid}.wav",
                              split=split, n_samples=len(clean))
            write_wav(out_dir / row.clean_path, clean)
            write_wav(out_dir / row.corrupt_path, corrupt)
            if noise is not None:
                row.noise_path = f"noise/{uid}.wav"
                row.snr_db = info["snr_db"]
                write_wav(out_dir / row.noise_path, noise)
            else:
                row.rir_id = f"rir_{index:05d}"
                row.t60 = info["t60"]
            rows.append(row)
            index += 1
    manifest = DatasetManifest(rows, task, seed, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
