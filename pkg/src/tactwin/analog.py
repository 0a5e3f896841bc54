"""Output-stage models: Sallen-Key reconstruction filter and H-bridge RLC filter.

Both stages are unity-gain second-order low-passes.  Besides the design
calculators this module can push emulator output through a stage in the time
domain, either as ordinary samples (bilinear transform, pre-warped at the
natural frequency) or as an ideal PWM edge stream, which is integrated
exactly between edges.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, signal

from .siggen.pwm import pulse_start

E6 = (1.0, 1.5, 2.2, 3.3, 4.7, 6.8)
E12 = (1.0, 1.2, 1.5, 1.8, 2.2, 2.7, 3.3, 3.9, 4.7, 5.6, 6.8, 8.2)
E24 = (1.0, 1.1, 1.2, 1.3, 1.5, 1.6, 1.8, 2.0, 2.2, 2.4, 2.7, 3.0,
       3.3, 3.6, 3.9, 4.3, 4.7, 5.1, 5.6, 6.2, 6.8, 7.5, 8.2, 9.1)
MAX_BRIDGE_SUPPLY = 200.0


class NonPositiveInput(ValueError):
    pass


class UnstableFilter(ValueError):
    pass


def _positive(**values):
    for name, v in values.items():
        if not (v > 0 and math.isfinite(v)):
            raise NonPositiveInput(f"{name} must be positive, got {v}")


def preferred_value(x: float, series=E12) -> float:
    """Nearest standard component value (log distance) from an E-series."""
    _positive(x=x)
    decade = math.floor(math.log10(x))
    candidates = [m * 10.0 ** d for d in (decade - 1, decade, decade + 1) for m in series]
    return min(candidates, key=lambda c: abs(math.log(c / x)))


# --- rational transfer functions ------------------------------------------------

@dataclass(frozen=True)
class RationalTransferFunction:
    """``H(s) = num(s) / den(s)``, coefficients in descending powers of ``s``."""

    num: tuple[float, ...]
    den: tuple[float, ...]

    def __post_init__(self):
        num = np.trim_zeros(np.atleast_1d(np.asarray(self.num, float)), "f")
        den = np.trim_zeros(np.atleast_1d(np.asarray(self.den, float)), "f")
        if den.size == 0:
            raise ValueError("denominator must be nonzero")
        if num.size == 0:
            num = np.zeros(1)
        if num.size > den.size:
            raise ValueError("transfer function must be proper")
        object.__setattr__(self, "num", tuple(num))
        object.__setattr__(self, "den", tuple(den))

    @property
    def order(self) -> int:
        return len(self.den) - 1

    def poles(self) -> np.ndarray:
        return np.roots(self.den) if self.order else np.array([])

    @property
    def stable(self) -> bool:
        return bool(np.all(self.poles().real < 0))

    def natural_frequency(self) -> float:
        """``sqrt(a0 / an) ** (1/n) / 2 pi``; the corner of a second-order low-pass."""
        if self.order == 0:
            return math.inf
        den = self.den
        return abs(den[-1] / den[0]) ** (1 / self.order) / (2 * math.pi)

    def quality_factor(self) -> float:
        if self.order != 2:
            raise ValueError("Q is defined for second-order denominators")
        a2, a1, a0 = self.den
        return math.sqrt(a0 * a2) / a1

    def response(self, f) -> np.ndarray:
        s = 2j * np.pi * np.asarray(f, dtype=float)
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def state_space(self):
        return signal.tf2ss(self.num, self.den)


def evaluate(tf: RationalTransferFunction, f):
    """Magnitude and phase (degrees) of ``tf`` at ``f`` Hz."""
    h = tf.response(f)
    mag = np.abs(h)
    phase = np.degrees(np.angle(h))
    if np.ndim(f):
        phase = np.degrees(np.unwrap(np.angle(h)))
        return mag, phase
    return float(mag), float(phase)


def bode_table(tf: RationalTransferFunction, freqs) -> np.ndarray:
    """Rows of ``(f, |H|, |H| dB, phase deg)``."""
    freqs = np.asarray(freqs, dtype=float)
    mag, phase = evaluate(tf, freqs)
    return np.column_stack([freqs, mag, 20 * np.log10(mag), phase])


def discretize(tf: RationalTransferFunction, dt: float, prewarp: float | None = None):
    """Bilinear transform with frequency pre-warping; returns ``(b, a)``.

    ``s -> k (z - 1) / (z + 1)`` with ``k = w0 / tan(w0 dt / 2)``, so the
    discrete and analog responses agree exactly at ``prewarp`` Hz (the natural
    frequency by default).
    """
    _positive(dt=dt)
    if not tf.stable:
        raise UnstableFilter(f"poles {tf.poles()} not in the left half-plane")
    n = tf.order
    if n == 0:
        return np.array([tf.num[0] / tf.den[0]]), np.array([1.0])
    f0 = tf.natural_frequency() if prewarp is None else prewarp
    w0 = 2 * math.pi * f0
    if not 0 < w0 * dt / 2 < math.pi / 2:
        raise ValueError(f"pre-warp frequency {f0} Hz not below Nyquist")
    k = w0 / math.tan(w0 * dt / 2)
    zm1, zp1 = np.array([1.0, -1.0]), np.array([1.0, 1.0])

    def substitute(coeffs):
        coeffs = np.concatenate([np.zeros(n + 1 - len(coeffs)), coeffs])
        out = np.zeros(n + 1)
        for power, c in zip(range(n, -1, -1), coeffs):
            term = c * k ** power * np.polymul(
                np.poly1d(zm1) ** power, np.poly1d(zp1) ** (n - power)).coeffs
            out[n + 1 - len(term):] += term
        return out

    b, a = substitute(np.asarray(tf.num)), substitute(np.asarray(tf.den))
    return b / a[0], a / a[0]


def apply_to_samples(tf: RationalTransferFunction, waveform, dt: float,
                     prewarp: float | None = None, settle: bool = False) -> np.ndarray:
    """Filter a sampled waveform through ``tf`` (bilinear, pre-warped).

    ``settle=True`` starts the filter in steady state for the first sample
    instead of at rest.
    """
    x = np.asarray(waveform, dtype=float)
    b, a = discretize(tf, dt, prewarp)
    if len(a) == 1:
        return b[0] * x
    zi = signal.lfilter_zi(b, a) * x[0] if settle and x.size else None
    if zi is None:
        return signal.lfilter(b, a, x)
    return signal.lfilter(b, a, x, zi=zi)[0]


def pwm_response(tf: RationalTransferFunction, duties, depth: int, carrier: float,
                 points_per_period: int = 8, alignment: str = "center",
                 level: float = 1.0, settle: bool = True) -> np.ndarray:
    """Exact filter output for an ideal PWM edge stream.

    The stream swings between 0 and ``level``; the output is sampled
    ``points_per_period`` times per carrier period, starting at the first
    period's leading boundary.  Between edges the input is constant, so the
    state is advanced with matrix exponentials (no discretization error).
    """
    _positive(carrier=carrier)
    if not tf.stable:
        raise UnstableFilter(f"poles {tf.poles()} not in the left half-plane")
    d = np.asarray(duties, dtype=np.int64).ravel()
    period_lsb = 1 << depth
    T = 1.0 / carrier
    m = int(points_per_period)
    A, B, C, D = tf.state_space()
    B = B[:, 0]
    C = C[0]
    D = float(D[0, 0]) if np.size(D) else 0.0
    nx = A.shape[0]

    if nx == 0:
        stream = _box_average(d, depth, m, alignment)
        return level * D * stream

    def phi(t):
        return linalg.expm(A * t)

    def gamma(t):
        # integral_0^t expm(A s) B ds via the augmented exponential
        aug = np.zeros((nx + 1, nx + 1))
        aug[:nx, :nx] = A
        aug[:nx, nx] = B
        return linalg.expm(aug * t)[:nx, nx]

    # response of the state to a unit pulse on [on, off) observed at time t
    def forced(on, off, t):
        lo, hi = min(on, t), min(off, t)
        if hi <= lo:
            return np.zeros(nx)
        return phi(t - hi) @ gamma(hi - lo)

    levels, inverse = np.unique(d, return_inverse=True)
    starts = pulse_start(levels, depth, alignment)
    sub_t = np.arange(m + 1) * T / m
    # g[level, j] = state contribution at sub-sample j (j = m is the period end)
    g = np.empty((len(levels), m + 1, nx))
    for i, (lv, st) in enumerate(zip(levels, starts)):
        on, off = st * T / period_lsb, (st + lv) * T / period_lsb
        for j, t in enumerate(sub_t):
            g[i, j] = forced(on, off, t)
    phis = np.stack([phi(t) for t in sub_t[:m]])       # (m, nx, nx)
    phi_T = phi(T)
    drive = g[inverse, m] * level                       # (n, nx)

    x0 = np.zeros(nx)
    if settle and d.size:
        # fixed point of the first period repeated forever
        x0 = np.linalg.solve(np.eye(nx) - phi_T, drive[0])
    states = _affine_recurrence(phi_T, drive, x0)       # state at each period start
    within = np.einsum("mij,nj->nmi", phis, states) + level * g[inverse, :m]
    y = within @ C
    if D:
        y = y + D * level * _box_average(d, depth, m, alignment).reshape(y.shape)
    return y.ravel()


def _box_average(d, depth, m, alignment):
    from .siggen.pwm import pwm_edge_stream
    return pwm_edge_stream(d, depth, oversample=m, alignment=alignment)


def _affine_recurrence(phi, drive, x0):
    """States ``x[k]`` with ``x[k+1] = phi x[k] + drive[k]``, ``x[0] = x0``.

    Written as ``s[k] = phi s[k-1] + u[k]`` with ``u = [x0, drive[:-1]]`` and
    run as one linear filter per input/state pair so the loop stays in C.
    """
    n, nx = drive.shape
    u = np.vstack([x0[None, :], drive[:-1]])
    eye = np.eye(nx)
    states = np.zeros((n, nx))
    for i in range(nx):
        for j in range(nx):
            b, a = signal.ss2tf(phi, eye[:, [j]], phi[[i]], eye[[i]][:, [j]])
            states[:, i] += signal.lfilter(np.atleast_2d(b)[0], a, u[:, j])
    return states


# --- Sallen-Key ------------------------------------------------------------------

@dataclass(frozen=True)
class SallenKeySpec:
    """Unity-gain Sallen-Key low-pass with equal resistors."""

    R: float
    C1: float = 15e-9
    C2: float = 10e-9

    def __post_init__(self):
        _positive(R=self.R, C1=self.C1, C2=self.C2)

    @property
    def f0(self) -> float:
        return 1.0 / (2 * math.pi * math.sqrt(self.C1 * self.C2) * self.R)

    @property
    def Q(self) -> float:
        return 0.5 * math.sqrt(self.C1 / self.C2)


def sallen_key_design(fc: float, C1: float = 15e-9, C2: float = 10e-9) -> SallenKeySpec:
    """Resistor value that puts the natural frequency at ``fc``."""
    _positive(fc=fc, C1=C1, C2=C2)
    return SallenKeySpec(1.0 / (2 * math.pi * math.sqrt(C1 * C2) * fc), C1, C2)


def sallen_key_tf(spec: SallenKeySpec) -> RationalTransferFunction:
    """``1 / (C1 C2 R^2 s^2 + 2 C2 R s + 1)``."""
    R = spec.R
    return RationalTransferFunction((1.0,), (spec.C1 * spec.C2 * R * R, 2 * spec.C2 * R, 1.0))


# --- H-bridge LC filter ------------------------------------------------------------

@dataclass(frozen=True)
class HBridgeFilterSpec:
    """Symmetric series L/R network driving the piezo capacitance.

    ``L`` and ``R_L`` are per inductor; the bridge has one in each leg.
    """

    L: float
    C_p: float
    R_L: float = 90.0
    R_d: float = 0.0
    V_DD: float = MAX_BRIDGE_SUPPLY

    def __post_init__(self):
        _positive(L=self.L, C_p=self.C_p)
        if self.R_L < 0 or self.R_d < 0:
            raise NonPositiveInput("resistances must be non-negative")
        if not 0 < self.V_DD <= MAX_BRIDGE_SUPPLY:
            raise NonPositiveInput(f"V_DD must be in (0, {MAX_BRIDGE_SUPPLY}] V")

    @property
    def f0(self) -> float:
        return 1.0 / (2 * math.pi * math.sqrt(2 * self.L * self.C_p))

    @property
    def Q(self) -> float:
        r = self.R_L + self.R_d
        return math.inf if r == 0 else math.sqrt(self.L) / (r * math.sqrt(2 * self.C_p))

    def output_voltage(self, filtered_duty) -> np.ndarray:
        """Bridge output for a filtered duty fraction in ``[0, 1]``."""
        return self.V_DD * (2 * np.asarray(filtered_duty, dtype=float) - 1)


def hbridge_design(fc: float, C_p: float) -> float:
    """Inductance per leg for a natural frequency of ``fc``."""
    _positive(fc=fc, C_p=C_p)
    return 1.0 / (2 * C_p * (2 * math.pi * fc) ** 2)


def damping_for(Q: float, L: float, C_p: float, R_L: float = 90.0) -> float:
    """Damping resistor for quality factor ``Q``; clamped at zero.

    A negative result means the inductor's own resistance already damps the
    circuit below ``Q``.
    """
    _positive(Q=Q, L=L, C_p=C_p)
    r_d = math.sqrt(L) / (Q * math.sqrt(2 * C_p)) - R_L
    if r_d < 0:
        warnings.warn(f"R_L = {R_L} ohm already exceeds the damping for Q = {Q}; "
                      "no damping resistor needed", stacklevel=2)
        return 0.0
    return r_d


def hbridge_tf(spec: HBridgeFilterSpec) -> RationalTransferFunction:
    """``1 / (2 L C_p s^2 + 2 (R_L + R_d) C_p s + 1)``."""
    L, C = spec.L, spec.C_p
    return RationalTransferFunction((1.0,), (2 * L * C, 2 * (spec.R_L + spec.R_d) * C, 1.0))


def implied_inductance(phase_deg: float, f: float, C_p: float, R: float) -> float:
    """Inductance that gives ``phase_deg`` at ``f`` for total series resistance ``R``."""
    w = 2 * math.pi * f
    t = math.tan(math.radians(-phase_deg))
    # tan(phi) = 2 w R C / (1 - 2 w^2 L C)
    return (1 - 2 * w * R * C_p / t) / (2 * w * w * C_p)


@dataclass
class FilterDesign:
    """Summary produced by the design calculators (JSON-friendly)."""

    kind: str
    values: dict = field(default_factory=dict)
    phase_table: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.values, "phase_table": self.phase_table}


def design_sallen_key(fc: float = 1300.0, C1: float = 15e-9, C2: float = 10e-9,
                      phase_freqs=(10, 50, 125, 250, 500, 750, 1000),
                      series=E12) -> FilterDesign:
    spec = sallen_key_design(fc, C1, C2)
    part = SallenKeySpec(preferred_value(spec.R, series), C1, C2)
    tf = sallen_key_tf(part)
    rows = [{"f_hz": f, "gain": g, "phase_deg": p}
            for f, (g, p) in ((f, evaluate(tf, f)) for f in phase_freqs)]
    return FilterDesign("sallen-key", {
        "fc_hz": fc, "C1_f": C1, "C2_f": C2,
        "R_ohm": spec.R, "R_part_ohm": part.R,
        "f0_hz": spec.f0, "f0_part_hz": part.f0, "Q": spec.Q,
    }, rows)


def design_hbridge(fc: float = 1000.0, C_p: float = 120e-9, Q: float = 0.6,
                   R_L: float = 90.0, L: float | None = None,
                   phase_freqs=(10, 50, 125, 250, 500, 750, 1000),
                   series=E6) -> FilterDesign:
    """H-bridge filter design.

    The inductance estimate is rounded to a stock value (``series``) unless
    ``L`` is given; the damping resistor and phase table use the stocked part.
    """
    L_est = hbridge_design(fc, C_p)
    L_part = preferred_value(L_est, series) if L is None else L
    R_d = damping_for(Q, L_part, C_p, R_L)
    undamped = HBridgeFilterSpec(L_part, C_p, R_L, 0.0)
    damped = HBridgeFilterSpec(L_part, C_p, R_L, R_d)
    rows = []
    for f in phase_freqs:
        g0, p0 = evaluate(hbridge_tf(undamped), f)
        g1, p1 = evaluate(hbridge_tf(damped), f)
        rows.append({"f_hz": f, "gain_undamped": g0, "phase_undamped_deg": p0,
                     "gain_damped": g1, "phase_damped_deg": p1})
    return FilterDesign("hbridge", {
        "fc_hz": fc, "C_p_f": C_p, "R_L_ohm": R_L, "Q_target": Q,
        "L_estimate_h": L_est, "L_part_h": L_part, "R_d_ohm": R_d,
        "f0_hz": damped.f0, "Q_undamped": undamped.Q, "Q_damped": damped.Q,
    }, rows)
