"""THD+N analysis by sine fitting, plus the bus latency harness.

A record is modelled as ``A sin(2 pi f t + phi) + c``.  Everything the fit
does not explain is counted as distortion plus noise::

    THD+N % = 100 / A * sqrt(sum(r**2) / N)

Band-limited figures low-pass the residual with a brick wall in the DFT
domain before applying the same formula.  Note the normalization uses the
fitted *peak* amplitude: a harmonic of relative amplitude ``h`` reads as
``100 h / sqrt(2)`` percent.  ``thdn_rms`` divides by the RMS of the
fundamental instead and reads ``100 h``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import interconnect, wiretab

DEFAULT_DT = 5e-6
MIN_SAMPLES = 64
BAND_EDGES = {"1k": 1e3, "20k": 20e3, "1M": 1e6, "full": math.inf}


class MetrologyError(ValueError):
    pass


class NoConvergence(MetrologyError):
    pass


class BandAboveNyquist(MetrologyError):
    pass


@dataclass
class SampledSignal:
    samples: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if self.samples.size < MIN_SAMPLES:
            raise MetrologyError(f"need at least {MIN_SAMPLES} samples, got {self.samples.size}")
        if not self.dt > 0:
            raise MetrologyError("dt must be positive")

    @property
    def n(self) -> int:
        return self.samples.size

    @property
    def nyquist(self) -> float:
        return 0.5 / self.dt

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n) * self.dt

    @classmethod
    def from_csv(cls, path, dt: float | None = None) -> "SampledSignal":
        """One value per row, or ``t, value`` rows (dt taken from the time column)."""
        data = np.genfromtxt(path, delimiter=",", comments="#")
        if data.ndim == 2 and np.isnan(data[0]).any():
            data = data[1:]                       # header row
        elif data.ndim == 1 and np.isnan(data[0]):
            data = data[1:]
        if data.ndim == 2:
            if dt is None:
                dt = float(np.median(np.diff(data[:, 0])))
            return cls(data[:, -1], dt)
        return cls(data, DEFAULT_DT if dt is None else dt)

    @classmethod
    def from_raw(cls, path, dt: float = DEFAULT_DT) -> "SampledSignal":
        """Little-endian ``u16`` capture file."""
        return cls(np.fromfile(path, dtype="<u2").astype(float), dt)


@dataclass
class SineFit:
    A: float
    f: float
    phi: float
    offset: float
    residual_power: float
    converged: bool
    iterations: int = 0

    def model(self, t) -> np.ndarray:
        return self.A * np.sin(2 * np.pi * self.f * t + self.phi) + self.offset


def _wrap(phi: float) -> float:
    return (phi + math.pi) % (2 * math.pi) - math.pi


def peak_frequency(sig: SampledSignal, lo: float = 0.0, hi: float | None = None) -> float:
    """Frequency of the strongest spectral line in ``[lo, hi]``.

    Hann window, 4x zero padding and a parabolic fit on the log magnitude of
    the three bins around the peak.
    """
    x = sig.samples - sig.samples.mean()
    nfft = 4 * sig.n
    spec = np.abs(np.fft.rfft(x * np.hanning(sig.n), nfft))
    freqs = np.fft.rfftfreq(nfft, sig.dt)
    hi = sig.nyquist if hi is None else hi
    idx = np.flatnonzero((freqs >= lo) & (freqs <= hi) & (freqs > 0))
    if idx.size == 0:
        raise MetrologyError(f"no bins in [{lo}, {hi}] Hz")
    k = int(idx[np.argmax(spec[idx])])
    if 0 < k < spec.size - 1:
        a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
        denom = a - 2 * b + c
        if denom < 0:
            k = k + 0.5 * (a - c) / denom
    return float(k / (nfft * sig.dt))


def _linear_fit(x, t, f):
    """Least-squares ``(A, phi, c)`` at fixed ``f``."""
    w = 2 * np.pi * f * t
    basis = np.column_stack([np.sin(w), np.cos(w), np.ones_like(t)])
    (s, co, c), *_ = np.linalg.lstsq(basis, x, rcond=None)
    return math.hypot(s, co), math.atan2(co, s), c


def fit_sine(sig: SampledSignal, f0_hint: float | None = None, *,
             refine_hint: bool = True, rtol: float = 1e-12,
             max_iter: int = 100, strict: bool = False) -> SineFit:
    """Four-parameter least-squares sine fit.

    Starts from the spectral peak within 20% of ``f0_hint`` (or anywhere when
    no hint is given), solves amplitude/phase/offset linearly, then refines all
    four with damped Gauss-Newton steps.  Stops when the relative cost change
    drops below ``rtol``.  On failure returns the best iterate with
    ``converged=False``, or raises ``NoConvergence`` if ``strict``.
    """
    x, t, n = sig.samples, sig.t, sig.n
    if f0_hint is None:
        f = peak_frequency(sig)
    else:
        if not 0 < f0_hint < sig.nyquist:
            raise MetrologyError(f"hint {f0_hint} Hz outside (0, {sig.nyquist})")
        f = f0_hint
        if refine_hint:
            try:
                f = peak_frequency(sig, 0.8 * f0_hint, min(1.2 * f0_hint, sig.nyquist))
            except MetrologyError:
                pass
    A, phi, c = _linear_fit(x, t, f)

    # time is centered inside the iteration to decorrelate f and phi
    tc = t - t[n // 2]
    p = np.array([A, f, phi + 2 * np.pi * f * t[n // 2], c])

    def residual(p):
        return x - (p[0] * np.sin(2 * np.pi * p[1] * tc + p[2]) + p[3])

    r = residual(p)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        arg = 2 * np.pi * p[1] * tc + p[2]
        s, co = np.sin(arg), np.cos(arg)
        J = np.column_stack([s, 2 * np.pi * tc * p[0] * co, p[0] * co, np.ones(n)])
        g = J.T @ r
        H = J.T @ J
        scale = np.sqrt(np.diag(H)) + 1e-300
        Hs = H / np.outer(scale, scale)
        gs = g / scale
        improved = False
        for _ in range(30):
            step = np.linalg.solve(Hs + lam * np.eye(4), gs) / scale
            trial = p + step
            r_new = residual(trial)
            new_cost = float(r_new @ r_new)
            if new_cost <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            # no descent direction left: a stationary point at working precision
            converged = True
            break
        change = (cost - new_cost) / max(cost, 1e-300)
        p, r, cost = trial, r_new, new_cost
        lam = max(lam / 10, 1e-12)
        if change < rtol or cost == 0.0:
            converged = True
            break

    if not converged and strict:
        raise NoConvergence(f"no convergence after {max_iter} iterations")
    A, f, phi, c = p
    phi = phi - 2 * np.pi * f * t[n // 2]
    if A < 0:
        A, phi = -A, phi + math.pi
    return SineFit(float(A), float(f), _wrap(float(phi)), float(c),
                   cost / n, converged, it)


def _band_edge(band) -> float:
    if isinstance(band, str):
        try:
            return BAND_EDGES[band]
        except KeyError:
            return parse_frequency(band)
    return float(band)


def parse_frequency(text: str) -> float:
    """``'15.6M'`` -> 15.6e6, ``'1k'`` -> 1000.0, plain numbers pass through."""
    text = str(text).strip()
    mult = {"k": 1e3, "K": 1e3, "M": 1e6, "G": 1e9}
    if text and text[-1] in mult:
        return float(text[:-1]) * mult[text[-1]]
    return float(text)


def band_limit(residual: np.ndarray, dt: float, edge: float) -> np.ndarray:
    """Zero all DFT bins above ``edge`` Hz."""
    spec = np.fft.rfft(residual)
    freqs = np.fft.rfftfreq(residual.size, dt)
    spec[freqs > edge] = 0
    return np.fft.irfft(spec, residual.size)


def _thdn_from_residual(r, A):
    if A <= 0:
        raise MetrologyError("fitted amplitude must be positive")
    return 100.0 / A * math.sqrt(float(r @ r) / r.size)


@dataclass
class ThdnReport:
    target_freq: float
    measured_freq: float
    thdn_full: float
    thdn_20k: float
    thdn_1k: float
    amplitude: float = math.nan
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def thdn_bands(sig: SampledSignal, fit: SineFit, bands=("1k", "20k", "full"),
               strict: bool = False, rms: bool = False) -> dict:
    """THD+N percentage for each requested band.

    Bands at or above Nyquist collapse to the full band; with ``strict`` they
    raise ``BandAboveNyquist`` instead.
    """
    if not fit.converged:
        raise NoConvergence("THD+N needs a converged fit")
    r = sig.samples - fit.model(sig.t)
    A = fit.A / math.sqrt(2) if rms else fit.A
    out = {}
    for band in bands:
        edge = _band_edge(band)
        if edge >= sig.nyquist:
            if strict and math.isfinite(edge):
                raise BandAboveNyquist(
                    f"band {band} above Nyquist {sig.nyquist:g} Hz")
            if math.isfinite(edge):
                warnings.warn(f"band {band} above Nyquist; reported as full band",
                              stacklevel=2)
            out[band] = _thdn_from_residual(r, A)
        else:
            out[band] = _thdn_from_residual(band_limit(r, sig.dt, edge), A)
    return out


def thdn(sig: SampledSignal, fit: SineFit, target: float | None = None,
         rms: bool = False) -> ThdnReport:
    """Full / 20 kHz / 1 kHz THD+N for a fitted record."""
    vals = thdn_bands(sig, fit, ("1k", "20k", "full"), rms=rms)
    return ThdnReport(
        target_freq=math.nan if target is None else float(target),
        measured_freq=fit.f, thdn_full=vals["full"], thdn_20k=vals["20k"],
        thdn_1k=vals["1k"], amplitude=fit.A, converged=fit.converged)


def thdn_rms(sig: SampledSignal, fit: SineFit, target: float | None = None) -> ThdnReport:
    """Variant normalized to the fundamental's RMS value ``U1 = A / sqrt(2)``."""
    return thdn(sig, fit, target, rms=True)


def analyze(sig: SampledSignal, target: float, rms: bool = False) -> ThdnReport:
    fit = fit_sine(sig, target)
    report = thdn(sig, fit, target, rms=rms)
    report.extra = {"phi": fit.phi, "offset": fit.offset,
                    "residual_power": fit.residual_power, "iterations": fit.iterations}
    return report


# --- latency harness -----------------------------------------------------------

@dataclass
class LoopStatistics:
    boards: int
    clock: float
    iterations: int
    mean: float
    minimum: float
    maximum: float
    counts: np.ndarray
    edges: np.ndarray
    frame: float = 1e-3

    @property
    def slack(self) -> float:
        return self.frame - self.mean

    @property
    def fits_frame(self) -> bool:
        return self.maximum <= self.frame


def measure_transfer_loop(topology: Sequence[interconnect.UnitSpec] | interconnect.VirtualBus,
                          tables_per_board: int = 1, clock: float = 15.6e6,
                          iterations: int = 500, jitter: float = 0.0, seed: int = 0,
                          bins: int = 20, frame: float = 1e-3) -> LoopStatistics:
    """Time the staging loop (one addressed package per board) on the virtual bus.

    The timer brackets each full loop like a GPIO toggled around the SPI
    traffic.  ``jitter`` adds relative Gaussian noise per transfer, standing in
    for host-side scheduling noise; at 0 every iteration is identical.
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if isinstance(topology, interconnect.VirtualBus):
        bus = topology
        bus.bulk_clock = clock
    else:
        bus = interconnect.VirtualBus.from_topology(topology, bulk_clock=clock)
    registry = bus.enumerate()
    pkg = wiretab.encode(wiretab.FrequencyTable())
    rng = np.random.default_rng(seed)
    durations = np.empty(iterations)
    for i in range(iterations):
        t0 = bus.now
        for entry in registry:
            bus.select(entry.dip)
            for _ in range(tables_per_board):
                report = bus.bulk_write(pkg)
                if jitter:
                    bus.now += report.duration * jitter * rng.standard_normal()
        durations[i] = bus.now - t0
    lo, hi = float(durations.min()), float(durations.max())
    if hi - lo <= 1e-9 * hi:
        # identical up to round-off; histogram a narrow window around them
        pad = max(1e-9 * hi, 1e-15)
        lo, hi = lo - pad, hi + pad
    counts, edges = np.histogram(durations, bins=bins, range=(lo, hi))
    return LoopStatistics(len(registry), clock, iterations, float(durations.mean()),
                          float(durations.min()), float(durations.max()), counts, edges,
                          frame)


def latency_table(model: interconnect.LatencyModel = interconnect.DEFAULT_LATENCY_MODEL,
                  boards=(1, 2, 8), clocks=interconnect.BULK_CLOCK_PRESETS) -> list[dict]:
    """Rows of modelled loop times (seconds) in the bench table layout."""
    return [{"clock_hz": c, **{f"boards_{n}": model.loop_time(c, n) for n in boards}}
            for c in clocks]


def write_latency_csv(rows: list[dict], fp) -> None:
    writer = csv.DictWriter(fp, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
