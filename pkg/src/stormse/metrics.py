"""Scale-invariant separation metrics, log-spectral distance and evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CAP_DB = 100.0


def _as_array(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def _ratio_db(num: float, den: float) -> float:
    if den <= 0:
        return CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10.0 * math.log10(num / den), -CAP_DB, CAP_DB))


def _target(estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    ref_energy = np.dot(reference, reference)
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    return np.dot(estimate, reference) / ref_energy * reference


def _check_lengths(*arrays):
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"signals must have equal lengths, got {sorted(lengths)}")


def si_sdr(estimate, reference) -> float:
    est, ref = _as_array(estimate), _as_array(reference)
    _check_lengths(est, ref)
    target = _target(est, ref)
    err = est - target
    return _ratio_db(np.dot(target, target), np.dot(err, err))


def si_decomposition(estimate, reference_clean, reference_noise):
    """Split the error into the part along the noise reference and the rest."""
    est, ref, noise = _as_array(estimate), _as_array(reference_clean), _as_array(reference_noise)
    _check_lengths(est, ref, noise)
    target = _target(est, ref)
    err = est - target
    noise_energy = np.dot(noise, noise)
    e_inter = np.dot(err, noise) / noise_energy * noise if noise_energy > 0 else np.zeros_like(err)
    return target, e_inter, err - e_inter


def si_sir_sar(estimate, reference_clean, reference_noise) -> tuple[float, float]:
    """(SI-SIR, SI-SAR) in dB.  A silent noise reference gives SI-SIR at the cap."""
    target, e_inter, e_artif = si_decomposition(estimate, reference_clean, reference_noise)
    t = np.dot(target, target)
    return _ratio_db(t, np.dot(e_inter, e_inter)), _ratio_db(t, np.dot(e_artif, e_artif))


def log_spectral_distance(estimate, reference, n_fft: int = 512, hop: int = 128, floor_db: float = -80.0) -> float:
    """RMS over frames of the per-frame L2 distance between log-power spectra (dB)."""
    est, ref = _as_array(estimate), _as_array(reference)
    _check_lengths(est, ref)

    def logspec(x):
        if len(x) < n_fft:
            x = np.pad(x, (0, n_fft - len(x)))
        frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
        power = np.abs(np.fft.rfft(frames * np.hanning(n_fft), axis=-1)) ** 2
        return np.maximum(10.0 * np.log10(power + 1e-300), floor_db)

    d = logspec(est) - logspec(ref)
    per_frame = np.sqrt(np.mean(d**2, axis=-1))
    return float(np.sqrt(np.mean(per_frame**2)))


@dataclass
class EvalRecord:
    id: str
    si_sdr: float
    si_sir: float | None = None
    si_sar: float | None = None
    lsd: float | None = None
    score_calls: int | None = None
    predictor_calls: int | None = None
    error: str | None = None


def evaluate_pair(uid, estimate, clean, noise=None, counts=None) -> EvalRecord:
    try:
        rec = EvalRecord(uid, si_sdr(estimate, clean), lsd=log_spectral_distance(estimate, clean))
        if noise is not None:
            rec.si_sir, rec.si_sar = si_sir_sar(estimate, clean, noise)
    except ValueError as exc:
        rec = EvalRecord(uid, float("nan"), error=str(exc))
    if counts:
        rec.score_calls = counts.get("score_calls")
        rec.predictor_calls = counts.get("predictor_calls")
    return rec


METRICS = ("si_sdr", "si_sir", "si_sar", "lsd")


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    label: str = ""

    @property
    def errors(self):
        return [r for r in self.records if r.error]

    def aggregate(self) -> dict:
        out = {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in self.records if not r.error and getattr(r, m) is not None])
            if len(vals):
                out[m] = {"mean": float(np.mean(vals)), "median": float(np.median(vals)),
                          "std": float(np.std(vals)), "n": int(len(vals))}
        return out

    def median(self, metric: str = "si_sdr") -> float:
        return self.aggregate()[metric]["median"]

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in sorted(self.records, key=lambda r: r.id)]
        lines.append(json.dumps({"aggregate": self.aggregate(), "label": self.label}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        agg = self.aggregate()
        head = f"{'metric':<8} {'mean':>9} {'median':>9} {'std':>9} {'n':>5}"
        lines = [f"# {self.label}" if self.label else "#", head]
        for m, s in agg.items():
            lines.append(f"{m:<8} {s['mean']:9.3f} {s['median']:9.3f} {s['std']:9.3f} {s['n']:5d}")
        if self.errors:
            lines.append(f"errors: {len(self.errors)} rows")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        records, label = [], ""
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "aggregate" in rec:
                label = rec.get("label", "")
            else:
                records.append(EvalRecord(**rec))
        return cls(records, label)


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Per-metric deltas (b - a) of means and medians."""
    agg_a, agg_b = a.aggregate(), b.aggregate()
    out = {}
    for m in METRICS:
        if m in agg_a and m in agg_b:
            out[m] = {k: agg_b[m][k] - agg_a[m][k] for k in ("mean", "median")}
    return out
