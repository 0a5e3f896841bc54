"""Bearing identification from measured tip-amplitude curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .model import (
    DEFAULT_BEARING,
    NO_LOAD,
    ActuatorError,
    BearingParams,
    BimorphGeometry,
    MaxwellLoad,
    SingularBoundary,
    tip_response,
)

MIN_POINTS = 8


class InsufficientData(ActuatorError):
    pass


class NoConvergence(ActuatorError):
    pass


class EmptyInput(ActuatorError):
    pass


@dataclass
class FrequencyResponse:
    """Measured peak tip amplitude (m) per frequency at drive ``voltage``."""

    f: np.ndarray
    amplitude: np.ndarray
    voltage: float = 20.0

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        self.amplitude = np.asarray(self.amplitude, dtype=float)
        if self.f.shape != self.amplitude.shape or self.f.ndim != 1:
            raise ActuatorError("f and amplitude must be 1-D and the same length")
        if np.any(np.diff(self.f) <= 0):
            raise ActuatorError("frequencies must be strictly increasing")
        if np.any(self.amplitude < 0) or np.any(self.f <= 0):
            raise ActuatorError("frequencies must be positive and amplitudes non-negative")

    @classmethod
    def read_csv(cls, path) -> "FrequencyResponse":
        """Rows ``f_Hz, amplitude_um, voltage_V`` (header optional)."""
        rows = []
        with open(path, newline="") as fp:
            for row in csv.reader(fp):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append([float(x) for x in row[:3]])
                except ValueError:
                    continue            # header
        if not rows:
            raise InsufficientData(f"{path}: no data rows")
        data = np.array(rows)
        volts = np.unique(data[:, 2]) if data.shape[1] > 2 else np.array([20.0])
        if volts.size != 1:
            raise ActuatorError(f"{path}: mixed drive voltages {volts}")
        return cls(data[:, 0], data[:, 1] * 1e-6, float(volts[0]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(["f_Hz", "amplitude_um", "voltage_V"])
            for f, a in zip(self.f, self.amplitude):
                w.writerow([f"{f:.6g}", f"{a * 1e6:.9g}", f"{self.voltage:g}"])


@dataclass
class BearingFit:
    params: BearingParams
    residual: float            # sum of squared amplitude errors, m^2
    starts: int
    converged: bool

    def to_dict(self) -> dict:
        return {**self.params.to_dict(), "residual_m2": self.residual,
                "starts": self.starts, "converged": self.converged}


def synthesize(geom: BimorphGeometry, bearing: BearingParams, f, voltage: float = 20.0,
               load: MaxwellLoad = NO_LOAD, noise: float = 0.0,
               rng: np.random.Generator | None = None) -> FrequencyResponse:
    """Model curve, optionally with multiplicative Gaussian noise of relative size ``noise``."""
    amp = tip_response(geom, bearing, load, np.asarray(f, float), voltage)
    if noise:
        rng = rng or np.random.default_rng()
        amp = amp * (1 + noise * rng.standard_normal(amp.shape))
    return FrequencyResponse(np.asarray(f, float), np.abs(amp), voltage)


def _starts(center: BearingParams, n: int, span: float) -> list[np.ndarray]:
    """``n`` log-spaced starts on the diagonal ``center * 10**[-span, span]``.

    Components alternate direction so the starts are not all co-scaled.
    """
    c = np.log(center.as_array())
    signs = np.array([1, -1, -1, 1])
    return [c + s * signs * math.log(10) for s in np.linspace(-span, span, n)]


def fit_bearing(geom: BimorphGeometry, measured: FrequencyResponse,
                load: MaxwellLoad = NO_LOAD, n_starts: int = 5,
                center: BearingParams = DEFAULT_BEARING, span: float = 0.5,
                ftol: float = 1e-15) -> BearingFit:
    """Bearing parameters minimizing ``sum (model - measured)^2`` over frequency.

    Unweighted absolute residuals, as in the plain least-squares formulation.
    The search runs in log parameters so positivity holds by construction.
    The lowest residual over all starts wins; ties break on the parameter
    vector.
    """
    if measured.f.size < MIN_POINTS:
        raise InsufficientData(f"need at least {MIN_POINTS} points, got {measured.f.size}")
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    scale = max(float(np.max(measured.amplitude)), 1e-300)
    y = measured.amplitude / scale

    def residual(x):
        try:
            with np.errstate(over="raise", invalid="raise"):
                model = tip_response(geom, BearingParams.from_array(np.exp(x)), load,
                                     measured.f, measured.voltage)
        except (SingularBoundary, FloatingPointError, ActuatorError):
            return np.full(y.shape, 1e6)
        return model / scale - y

    results = []
    for x0 in _starts(center, n_starts, span):
        try:
            r = least_squares(residual, x0, method="lm", ftol=ftol, xtol=ftol,
                              gtol=ftol, max_nfev=4000)
        except (ValueError, FloatingPointError):
            continue
        if np.all(np.isfinite(r.x)):
            results.append((2 * r.cost, tuple(np.exp(r.x)), r.success))
    if not results:
        raise NoConvergence("no start produced a finite fit")
    cost, x, ok = min(results, key=lambda t: (t[0], t[1]))
    return BearingFit(BearingParams.from_array(x), cost * scale ** 2, len(results), bool(ok))


def fit_residual(geom: BimorphGeometry, measured: FrequencyResponse, params: BearingParams,
                 load: MaxwellLoad = NO_LOAD) -> float:
    model = tip_response(geom, params, load, measured.f, measured.voltage)
    return float(np.sum((model - measured.amplitude) ** 2))


def median_params(fits: Sequence[BearingParams]) -> BearingParams:
    """Componentwise median; for even counts the lower of the two middle values."""
    if not fits:
        raise EmptyInput("need at least one fit")
    arr = np.sort(np.array([p.as_array() for p in fits]), axis=0)
    return BearingParams.from_array(arr[(len(fits) - 1) // 2])
