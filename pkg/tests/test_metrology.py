import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tactwin import interconnect, metrology
from tactwin.metrology import SampledSignal
from tactwin.pipeline import capture_tone

DT = 5e-6


def tone(A=1.0, f=250.0, phi=0.3, n=40_000, dt=DT, offset=0.0):
    t = np.arange(n) * dt
    return SampledSignal(A * np.sin(2 * np.pi * f * t + phi) + offset, dt)


def test_exact_sine_recovered():
    fit = metrology.fit_sine(tone(), 250.0)
    assert fit.converged
    assert fit.A == pytest.approx(1.0, rel=1e-10)
    assert fit.f == pytest.approx(250.0, rel=1e-10)
    assert fit.phi == pytest.approx(0.3, abs=1e-9)
    assert fit.residual_power < 1e-20


def test_fit_recovers_offset_and_off_hint_frequency():
    fit = metrology.fit_sine(tone(0.4, 251.7, -1.1, offset=0.5), 240.0)
    assert fit.f == pytest.approx(251.7, rel=1e-9)
    assert fit.offset == pytest.approx(0.5, abs=1e-9)


def test_noise_residual_power():
    sigma = 0.01
    powers = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        sig = tone()
        sig = SampledSignal(sig.samples + sigma * rng.standard_normal(sig.n), DT)
        powers.append(metrology.fit_sine(sig, 250.0).residual_power)
    assert np.mean(powers) == pytest.approx(sigma ** 2, rel=0.1)


def test_pure_sine_has_zero_thdn():
    sig = tone()
    rep = metrology.analyze(sig, 250.0)
    assert rep.thdn_full < 1e-8 and rep.thdn_20k < 1e-8 and rep.thdn_1k < 1e-8


def test_harmonic_closed_form():
    # harmonic of relative amplitude h reads 100 h / sqrt(2) percent, peak-normalized
    n = 40_000
    t = np.arange(n) * DT
    x = np.sin(2 * np.pi * 250 * t) + 0.005 * np.sin(2 * np.pi * 750 * t)
    sig = SampledSignal(x, DT)
    rep = metrology.analyze(sig, 250.0)
    assert rep.thdn_full == pytest.approx(0.5 / math.sqrt(2), rel=1e-3)
    assert rep.thdn_1k == pytest.approx(0.5 / math.sqrt(2), rel=1e-3)
    rms = metrology.analyze(sig, 250.0, rms=True)
    assert rms.thdn_full == pytest.approx(0.5, rel=1e-3)


def test_band_limit_removes_out_of_band_harmonic():
    t = np.arange(40_000) * DT
    x = np.sin(2 * np.pi * 250 * t) + 0.01 * np.sin(2 * np.pi * 5000 * t)
    rep = metrology.analyze(SampledSignal(x, DT), 250.0)
    assert rep.thdn_1k < 2e-3          # fit leakage only, far below the 0.707 % harmonic
    assert rep.thdn_20k == pytest.approx(1 / math.sqrt(2), rel=1e-3)


def test_band_above_nyquist():
    sig = tone(dt=1e-4, n=4000)
    fit = metrology.fit_sine(sig, 250.0)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = metrology.thdn_bands(sig, fit, ("20k", "full"))
    assert w and out["20k"] == out["full"]
    with pytest.raises(metrology.BandAboveNyquist):
        metrology.thdn_bands(sig, fit, ("20k",), strict=True)


def test_input_validation():
    with pytest.raises(metrology.MetrologyError):
        SampledSignal(np.zeros(10))
    with pytest.raises(metrology.MetrologyError):
        SampledSignal(np.zeros(100), dt=0)
    assert metrology.parse_frequency("15.6M") == 15.6e6
    assert metrology.parse_frequency("967k") == 967e3
    assert metrology.parse_frequency("250") == 250.0


def test_csv_and_raw_readers(tmp_path):
    sig = tone(n=200)
    p = tmp_path / "s.csv"
    np.savetxt(p, np.column_stack([sig.t, sig.samples]), delimiter=",", header="t,v")
    back = SampledSignal.from_csv(p)
    assert back.dt == pytest.approx(DT) and np.allclose(back.samples, sig.samples)
    raw = tmp_path / "s.u16"
    np.arange(100, dtype="<u2").tofile(raw)
    assert SampledSignal.from_raw(raw).samples[-1] == 99


def test_emulated_ten_hz_fit():
    cap = capture_tone(10.0, duration=1.0)
    fit = metrology.fit_sine(cap.signal, 10.0)
    assert fit.f == pytest.approx(9.918, abs=1e-3)


def test_emulated_250_hz_quality():
    rep = metrology.analyze(capture_tone(250.0, duration=0.5).signal, 250.0)
    assert rep.converged and rep.thdn_1k < 1.0
    assert rep.measured_freq == pytest.approx(13 * 0 + 327 * 25000 / 2 ** 15, abs=1e-3)


@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.05), st.floats(0.0, 0.05),
       st.sampled_from([2, 3, 5, 40, 150]))
def test_band_monotonicity(seed, h, sigma, order):
    rng = np.random.default_rng(seed)
    n = 8192
    t = np.arange(n) * DT
    x = np.sin(2 * np.pi * 250 * t + 0.2) + h * np.sin(2 * np.pi * order * 250 * t) \
        + sigma * rng.standard_normal(n)
    sig = SampledSignal(x, DT)
    fit = metrology.fit_sine(sig, 250.0)
    b = metrology.thdn_bands(sig, fit, ("1k", "20k", "full"))
    assert b["1k"] <= b["20k"] + 1e-12 <= b["full"] + 2e-12


@given(st.floats(0.05, 2.0), st.floats(20.0, 2000.0), st.floats(-3.0, 3.0))
def test_fit_invariant_to_amplitude_frequency_phase(A, f, phi):
    fit = metrology.fit_sine(tone(A, f, phi, n=20_000), f)
    assert fit.A == pytest.approx(A, rel=1e-6)
    assert fit.f == pytest.approx(f, rel=1e-7)


# --- latency harness ------------------------------------------------------------

def test_loop_timing_published_points():
    one = [interconnect.UnitSpec(0, "ASG")]
    st1 = metrology.measure_transfer_loop(one, clock=7.8e6, iterations=20)
    assert st1.mean * 1e6 == pytest.approx(190.0, rel=0.02)
    two = [interconnect.UnitSpec(d, "ASG") for d in range(2)]
    st2 = metrology.measure_transfer_loop(two, clock=3.9e6, iterations=20)
    assert st2.mean * 1e6 == pytest.approx(746.0, rel=0.01)
    eight = [interconnect.UnitSpec(d, "ASG") for d in range(8)]
    st8 = metrology.measure_transfer_loop(eight, clock=15.6e6, iterations=20)
    assert 779e-6 <= st8.mean <= 785e-6
    assert st8.slack == pytest.approx(220e-6, abs=6e-6)
    assert st8.fits_frame


def test_loop_jitter_is_seeded():
    specs = [interconnect.UnitSpec(d, "ASG") for d in range(2)]
    a = metrology.measure_transfer_loop(specs, iterations=50, jitter=0.05, seed=4)
    b = metrology.measure_transfer_loop(specs, iterations=50, jitter=0.05, seed=4)
    assert a.mean == b.mean and a.maximum > a.minimum
    assert a.counts.sum() == 50


def test_latency_table_layout(tmp_path):
    rows = metrology.latency_table()
    assert len(rows) == 5 and all(len(r) == 4 for r in rows)
    with open(tmp_path / "l.csv", "w", newline="") as fp:
        metrology.write_latency_csv(rows, fp)
    assert (tmp_path / "l.csv").read_text().startswith("clock_hz,boards_1,boards_2,boards_8")
