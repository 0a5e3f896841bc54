"""Harmonic response of a clamped piezoelectric bimorph.

The free length is one uniform Euler-Bernoulli segment.  Along it the state
``z = [w, theta, m, v]`` (deflection, slope, ``m = EI w''``, ``v = EI w'''``)
is propagated with the Krylov-function transfer matrix.  The clamp is a
Kelvin-Voigt bearing: translational ``K_t = k_t + j w d_t`` and rotational
``K_r = k_r + j w d_r``.  The piezo layers act as a uniform internal moment
``M_p = coupling * V``, which enters the problem only through the two end
conditions::

    clamp:  m(0) = M_p + K_r theta(0)      v(0) = -K_t w(0)
    tip:    m(L) = M_p                     v(L) = (K_load - m_tip w^2) w(L)

A rigid clamp and no load give ``w = M_p x^2 / (2 EI)`` at DC.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Sequence

import numpy as np

RIGID = 1e15        # stiffness standing in for "infinitely stiff"


class ActuatorError(ValueError):
    pass


class SingularBoundary(ActuatorError):
    pass


def _check_positive(obj):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (int, float)) and not (v > 0 and math.isfinite(v)):
            raise ActuatorError(f"{type(obj).__name__}.{f.name} must be positive, got {v}")


@dataclass(frozen=True)
class BimorphGeometry:
    """Free length and lumped section properties of the bimorph.

    ``layers`` lists ``(thickness m, modulus Pa, density kg/m^3)`` bottom to
    top; bending stiffness and mass per length follow from classical
    lamination about the neutral axis.  ``coupling`` is the internal bending
    moment per volt (N m / V).  ``loss_factor`` adds structural damping as a
    complex modulus ``E (1 + j eta)``; ``tip_mass`` is a point mass
    (contact pin) at the free end.
    """

    length: float
    width: float
    layers: tuple[tuple[float, float, float], ...]
    coupling: float
    C_p: float = 120e-9
    loss_factor: float = 0.0
    tip_mass: float = 0.0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(map(float, l)) for l in self.layers))
        for name in ("length", "width", "coupling", "C_p"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ActuatorError(f"{name} must be positive, got {v}")
        if not self.layers or any(min(l) <= 0 for l in self.layers):
            raise ActuatorError("layers need positive thickness, modulus and density")
        if self.loss_factor < 0 or self.tip_mass < 0:
            raise ActuatorError("loss factor and tip mass must be non-negative")

    @property
    def thickness(self) -> float:
        return sum(l[0] for l in self.layers)

    @property
    def EI(self) -> float:
        z = np.concatenate([[0.0], np.cumsum([l[0] for l in self.layers])])
        E = np.array([l[1] for l in self.layers])
        # neutral axis: modulus-weighted centroid
        za = np.sum(E * (z[1:] ** 2 - z[:-1] ** 2) / 2) / np.sum(E * np.diff(z))
        return float(self.width * np.sum(E * ((z[1:] - za) ** 3 - (z[:-1] - za) ** 3) / 3))

    @property
    def rho_A(self) -> float:
        return float(self.width * sum(t * rho for t, _, rho in self.layers))

    def rigid_clamp_resonance(self, mode: int = 1) -> float:
        """Textbook cantilever resonance for a perfectly rigid clamp (no tip mass)."""
        roots = (1.8751040687, 4.6940911330, 7.8547574382, 10.9955407349)
        bl = roots[mode - 1] if mode <= len(roots) else (2 * mode - 1) * math.pi / 2
        return bl ** 2 / (2 * math.pi * self.length ** 2) * math.sqrt(self.EI / self.rho_A)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "BimorphGeometry":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class BearingParams:
    """Kelvin-Voigt clamp: ``k_t`` N/m, ``d_t`` N s/m, ``k_r`` N m/rad, ``d_r`` N m s/rad."""

    k_t: float
    d_t: float
    k_r: float
    d_r: float

    def __post_init__(self):
        _check_positive(self)

    def as_array(self) -> np.ndarray:
        return np.array([self.k_t, self.d_t, self.k_r, self.d_r])

    @classmethod
    def from_array(cls, x) -> "BearingParams":
        return cls(*map(float, x))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def rigid(cls) -> "BearingParams":
        return cls(RIGID, 1e-30, RIGID, 1e-30)


DEFAULT_BEARING = BearingParams(k_t=8870.0, d_t=3.62, k_r=0.54, d_r=1.02e-5)


@dataclass(frozen=True)
class MaxwellLoad:
    """Generalized Maxwell element at the tip: a spring in parallel with
    spring-damper branches.  ``stiffness(w)`` is force per displacement."""

    branches: tuple[tuple[float, float], ...] = ()
    parallel: float = 0.0
    label: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(tuple(map(float, b)) for b in self.branches))
        if self.parallel < 0 or any(k < 0 or d < 0 for k, d in self.branches):
            raise ActuatorError("Maxwell parameters must be non-negative")

    def stiffness(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        K = np.full(omega.shape, self.parallel, dtype=complex)
        for k, d in self.branches:
            jwd = 1j * omega * d
            if k == 0 or d == 0:
                continue
            K = K + jwd * k / (k + jwd)
        return K

    def impedance(self, omega) -> np.ndarray:
        """Mechanical impedance ``F / velocity``."""
        omega = np.asarray(omega, dtype=float)
        return self.stiffness(omega) / (1j * omega)

    def to_dict(self) -> dict:
        return {"branches": [list(b) for b in self.branches],
                "parallel": self.parallel, "label": self.label}

    @classmethod
    def from_dict(cls, data: dict) -> "MaxwellLoad":
        return cls(tuple(tuple(b) for b in data.get("branches", ())),
                   data.get("parallel", 0.0), data.get("label", "none"))


NO_LOAD = MaxwellLoad()


def krylov(x):
    """``C0, S1, C2, S3`` at ``x`` (complex arrays allowed)."""
    ch, sh, c, s = np.cosh(x), np.sinh(x), np.cos(x), np.sin(x)
    return (ch + c) / 2, (sh + s) / 2, (ch - c) / 2, (sh - s) / 2


def transfer_matrix(beta, EI, L) -> np.ndarray:
    """Field matrix mapping ``z(0)`` to ``z(L)``; ``beta`` may be a vector."""
    beta = np.atleast_1d(beta)
    EI = np.broadcast_to(EI, beta.shape)
    C0, S1, C2, S3 = krylov(beta * L)
    T = np.empty(beta.shape + (4, 4), dtype=complex)
    b, e = beta, EI
    T[..., 0, :] = np.stack([C0, S1 / b, C2 / (b ** 2 * e), S3 / (b ** 3 * e)], -1)
    T[..., 1, :] = np.stack([b * S3, C0, S1 / (b * e), C2 / (b ** 2 * e)], -1)
    T[..., 2, :] = np.stack([e * b ** 2 * C2, e * b * S3, C0, S1 / b], -1)
    T[..., 3, :] = np.stack([e * b ** 3 * S1, e * b ** 2 * C2, b * S3, C0], -1)
    return T


def tip_response_complex(geom: BimorphGeometry, bearing: BearingParams,
                         load: MaxwellLoad, f, V: float = 1.0) -> np.ndarray:
    """Complex tip deflection (m) at frequencies ``f`` for drive amplitude ``V``."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    if np.any(f <= 0):
        raise ActuatorError("frequencies must be positive")
    w = 2 * np.pi * f
    EI = geom.EI * (1 + 1j * geom.loss_factor)
    beta = (geom.rho_A * w ** 2 / EI) ** 0.25
    T = transfer_matrix(beta, EI, geom.length)
    Kt = bearing.k_t + 1j * w * bearing.d_t
    Kr = bearing.k_r + 1j * w * bearing.d_r
    # the tip mass acts as a negative dynamic stiffness
    Kl = load.stiffness(w) - geom.tip_mass * w ** 2
    Mp = geom.coupling

    # z0 = a * w0 + b * theta0 + c, with c = [0, 0, Mp, 0]
    n = f.size
    col_w = np.zeros((n, 4), complex)
    col_w[:, 0] = 1
    col_w[:, 3] = -Kt
    col_t = np.zeros((n, 4), complex)
    col_t[:, 1] = 1
    col_t[:, 2] = Kr
    const = np.zeros((n, 4), complex)
    const[:, 2] = Mp
    zw = np.einsum("nij,nj->ni", T, col_w)
    zt = np.einsum("nij,nj->ni", T, col_t)
    zc = np.einsum("nij,nj->ni", T, const)
    # tip rows: m_L - Mp = 0 and v_L - K_load w_L = 0
    A = np.empty((n, 2, 2), complex)
    rhs = np.empty((n, 2), complex)
    A[:, 0, 0], A[:, 0, 1] = zw[:, 2], zt[:, 2]
    A[:, 1, 0] = zw[:, 3] - Kl * zw[:, 0]
    A[:, 1, 1] = zt[:, 3] - Kl * zt[:, 0]
    rhs[:, 0] = Mp - zc[:, 2]
    rhs[:, 1] = -(zc[:, 3] - Kl * zc[:, 0])
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    scale = np.abs(A[:, 0]).max(axis=1) * np.abs(A[:, 1]).max(axis=1)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) <= 1e-14 * scale):
        raise SingularBoundary("boundary system is singular for these parameters")
    w0 = (rhs[:, 0] * A[:, 1, 1] - rhs[:, 1] * A[:, 0, 1]) / det
    t0 = (A[:, 0, 0] * rhs[:, 1] - A[:, 1, 0] * rhs[:, 0]) / det
    tip = zw[:, 0] * w0 + zt[:, 0] * t0 + zc[:, 0]
    return V * tip


def tip_response(geom: BimorphGeometry, bearing: BearingParams, load: MaxwellLoad = NO_LOAD,
                 f=100.0, V: float = 1.0):
    """Tip deflection amplitude (m); scalar in, scalar out."""
    amp = np.abs(tip_response_complex(geom, bearing, load, f, V))
    return float(amp[0]) if np.ndim(f) == 0 else amp


def static_tip(geom: BimorphGeometry, V: float = 1.0) -> float:
    """Rigid-clamp, unloaded deflection at DC."""
    return geom.coupling * V * geom.length ** 2 / (2 * geom.EI)


def _safe_amp(geom, bearing, load, f):
    try:
        return tip_response(geom, bearing, load, f)
    except SingularBoundary:
        return math.inf


def first_resonance(geom: BimorphGeometry, bearing: BearingParams,
                    load: MaxwellLoad = NO_LOAD, f_max: float = 5000.0,
                    points: int = 4000) -> float:
    """Frequency of the first peak of ``|tip|`` (golden-section refined)."""
    f = np.geomspace(1.0, f_max, points)
    amp = np.array([_safe_amp(geom, bearing, load, x) for x in f])
    # the relative margin ignores round-off ripple on the flat low-frequency part
    rise = amp[1:-1] > amp[:-2] * (1 + 1e-9)
    fall = amp[1:-1] >= amp[2:] * (1 + 1e-9)
    peaks = np.flatnonzero(rise & fall) + 1
    if peaks.size == 0:
        raise ActuatorError("no resonance below f_max")
    lo, hi = f[peaks[0] - 1], f[peaks[0] + 1]
    g = (math.sqrt(5) - 1) / 2
    for _ in range(80):
        a, b = hi - g * (hi - lo), lo + g * (hi - lo)
        # an undamped system is singular exactly at resonance
        if _safe_amp(geom, bearing, load, a) > _safe_amp(geom, bearing, load, b):
            hi = b
        else:
            lo = a
    return (lo + hi) / 2


# --- shipped configuration --------------------------------------------------------

@dataclass
class ActuatorConfig:
    geometry: BimorphGeometry
    bearing: BearingParams = DEFAULT_BEARING
    loads: dict = field(default_factory=dict)
    reference_voltage: float = 20.0
    note: str = ""

    def load(self, label: str) -> MaxwellLoad:
        if label in ("none", "unloaded"):
            return NO_LOAD
        try:
            return self.loads[label]
        except KeyError:
            raise ActuatorError(f"unknown load {label!r}; have {sorted(self.loads)}") from None

    def to_dict(self) -> dict:
        return {"note": self.note, "reference_voltage": self.reference_voltage,
                "geometry": self.geometry.to_dict(), "bearing": self.bearing.to_dict(),
                "loads": {k: v.to_dict() for k, v in self.loads.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "ActuatorConfig":
        return cls(BimorphGeometry.from_dict(data["geometry"]),
                   BearingParams(**data.get("bearing", DEFAULT_BEARING.to_dict())),
                   {k: MaxwellLoad.from_dict(v) for k, v in data.get("loads", {}).items()},
                   data.get("reference_voltage", 20.0), data.get("note", ""))


def load_config(path=None) -> ActuatorConfig:
    """Read an actuator config; without ``path`` the packaged default."""
    if path is None:
        text = resources.files("tactwin").joinpath("data/actuator.json").read_text()
    else:
        with open(path) as fp:
            text = fp.read()
    return ActuatorConfig.from_dict(json.loads(text))


def save_config(config: ActuatorConfig, path) -> None:
    with open(path, "w") as fp:
        json.dump(config.to_dict(), fp, indent=2)
        fp.write("\n")
