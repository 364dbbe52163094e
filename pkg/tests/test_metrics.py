import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormse.metrics import (CAP_DB, EvalRecord, EvalReport, compare_reports, evaluate_pair, log_spectral_distance,
                             si_decomposition, si_sdr, si_sir_sar)


def orthogonal_pair(rng, n=4000):
    s = rng.standard_normal(n)
    v = rng.standard_normal(n)
    v -= np.dot(v, s) / np.dot(s, s) * s
    return s, v


def test_si_sdr_examples(rng):
    s, v = orthogonal_pair(rng)
    assert si_sdr(s, s) == CAP_DB
    assert si_sdr(2 * s, s) == CAP_DB
    v *= np.linalg.norm(s) / np.linalg.norm(v)
    assert si_sdr(s + v, s) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        si_sdr(s, np.zeros_like(s))
    with pytest.raises(ValueError):
        si_sdr(s, s[:-1])


def test_si_sdr_scale_invariance_exact(rng):
    s, v = orthogonal_pair(rng)
    est = s + 0.3 * v
    vals = [si_sdr(a * est, s) for a in (0.5, 1.0, 3.0)]
    assert vals[0] == pytest.approx(vals[1], abs=1e-10) and vals[2] == pytest.approx(vals[1], abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 10_000))
def test_si_sdr_scale_invariance_property(scale, seed):
    rng = np.random.default_rng(seed)
    s, e = rng.standard_normal(256), rng.standard_normal(256)
    assert si_sdr(scale * (s + e), s) == pytest.approx(si_sdr(s + e, s), abs=1e-8)


def test_si_sir_sar_examples(rng):
    s, n = orthogonal_pair(rng)
    assert si_sir_sar(s, s, n) == (CAP_DB, CAP_DB)
    sir, sar = si_sir_sar(s + 0.1 * n, s, n)
    assert sar == CAP_DB
    assert sir == pytest.approx(20 * math.log10(np.linalg.norm(s) / (0.1 * np.linalg.norm(n))), abs=1e-9)
    sir0, _ = si_sir_sar(s + 0.1 * n, s, np.zeros_like(n))
    assert sir0 == CAP_DB


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_decomposition(seed):
    rng = np.random.default_rng(seed)
    s, n, a = rng.standard_normal(512), rng.standard_normal(512), rng.standard_normal(512)
    est = s + 0.5 * n + 0.2 * a
    target, e_inter, e_artif = si_decomposition(est, s, n)
    e = est - target
    assert np.dot(e, e) == pytest.approx(np.dot(e_inter, e_inter) + np.dot(e_artif, e_artif), rel=1e-6)


def test_lsd_examples(rng):
    x = rng.standard_normal(8000)
    assert log_spectral_distance(x, x) == 0.0
    assert log_spectral_distance(2 * x, x) == pytest.approx(20 * math.log10(2), abs=1e-9)
    assert log_spectral_distance(np.zeros(4000), np.zeros(4000)) == 0.0


def test_report_roundtrip_and_compare(rng):
    s, n = orthogonal_pair(rng, 2000)
    recs = [evaluate_pair(f"u{i}", s + (i + 1) * 0.1 * n, s, n, {"score_calls": 10, "predictor_calls": 1})
            for i in range(3)]
    rep = EvalReport(recs, "a")
    assert rep.aggregate()["si_sdr"]["n"] == 3
    assert rep.median() == pytest.approx(recs[1].si_sdr)
    text = rep.to_jsonl()
    back = EvalReport.from_jsonl(text)
    assert back.to_jsonl() == text and back.label == "a"
    assert "si_sdr" in rep.to_table()
    other = EvalReport([EvalRecord(r.id, r.si_sdr + 1, r.si_sir, r.si_sar, r.lsd) for r in recs], "b")
    delta = compare_reports(rep, other)
    assert delta["si_sdr"]["median"] == pytest.approx(1.0)
    assert delta["lsd"]["mean"] == 0.0


def test_evaluate_pair_length_error(rng):
    s = rng.standard_normal(100)
    rec = evaluate_pair("x", s[:-1], s)
    assert rec.error and math.isnan(rec.si_sdr)
    assert len(EvalReport([rec]).errors) == 1
